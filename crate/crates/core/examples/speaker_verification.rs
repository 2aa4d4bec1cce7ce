//! Speaker identification fine-tuning, then verification by cosine scoring of
//! the fused embeddings on unseen utterances of the same speakers.
//!
//! ```text
//! cargo run --release --example speaker_verification
//! ```

use ctal::audio::{extract, FrontendConfig};
use ctal::data::PairExample;
use ctal::finetune::{extract_identity_embedding, finetune, FinetuneConfig, FinetuneModel, LabeledExample, TaskHead, Target};
use ctal::metrics::{cosine, eer};
use ctal::model::ModelConfig;
use ctal::synth::{generate, SynthConfig, SynthKind, SynthUtterance};
use ctal::tokenizer::{train_bbpe, BbpeVocab};
use ctal::CtalRng;
use rand::SeedableRng;

fn pairs(utts: &[SynthUtterance], vocab: &BbpeVocab) -> ctal::Result<Vec<PairExample>> {
    let frontend = FrontendConfig::default();
    utts.iter()
        .map(|u| {
            Ok(PairExample {
                id: u.id.clone(),
                tokens: vocab.encode(&u.transcript).ids,
                features: extract(&u.waveform, &frontend)?,
                label: Some(u.label.clone()),
            })
        })
        .collect()
}

fn trial_eer(model: &FinetuneModel<f32>, data: &[PairExample], speakers: &[usize]) -> ctal::Result<f64> {
    let emb = data
        .iter()
        .map(|p| extract_identity_embedding(model, p))
        .collect::<ctal::Result<Vec<_>>>()?;
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let s = cosine(&emb[i], &emb[j]);
            if speakers[i] == speakers[j] {
                same.push(s);
            } else {
                diff.push(s);
            }
        }
    }
    eer(&same, &diff)
}

fn main() -> ctal::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut cfg = SynthConfig::new(SynthKind::Speaker, 64);
    cfg.speakers = 4;
    let train_utts = generate(&cfg)?;
    cfg.seed = 7;
    let test_utts = generate(&cfg)?;
    let vocab = train_bbpe(train_utts.iter().map(|u| u.transcript.as_str()), 320)?;
    let train: Vec<LabeledExample> = pairs(&train_utts, &vocab)?
        .into_iter()
        .zip(&train_utts)
        .map(|(pair, u)| LabeledExample {
            pair,
            target: Target::Class(u.speaker),
        })
        .collect();
    let test = pairs(&test_utts, &vocab)?;
    let test_speakers: Vec<usize> = test_utts.iter().map(|u| u.speaker).collect();

    let mut mcfg = ModelConfig::tiny(vocab.len());
    mcfg.dropout = 0.0;
    let mut model = FinetuneModel::new(mcfg, TaskHead::Speaker { speakers: 4 }, &mut CtalRng::seed_from_u64(0))?;
    println!("EER before training {:.3}", trial_eer(&model, &test, &test_speakers)?);
    let fcfg = FinetuneConfig {
        epochs: 30,
        lr: 1e-3,
        ..FinetuneConfig::default()
    };
    let losses = finetune(&mut model, &train, &fcfg)?;
    println!("training loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
    println!("EER after training  {:.3}", trial_eer(&model, &test, &test_speakers)?);
    Ok(())
}
