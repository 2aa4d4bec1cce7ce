//! Four-class emotion recognition on synthetic pairs: short pre-training,
//! fine-tuning with the fused representation, and WA/UA on a held-out draw.
//!
//! ```text
//! cargo run --release --example finetune_emotion -- [pretrain_steps]
//! ```

use ctal::audio::{extract, FrontendConfig};
use ctal::data::PairExample;
use ctal::finetune::{finetune, infer, FinetuneConfig, FinetuneModel, LabeledExample, TaskHead, Target};
use ctal::metrics::{argmax, wa_ua};
use ctal::model::checkpoint::Checkpoint;
use ctal::model::{CtalModel, ModelConfig};
use ctal::pretrain::{run_pretraining, PretrainConfig};
use ctal::synth::{generate, SynthConfig, SynthKind, SynthUtterance, EMOTIONS};
use ctal::tokenizer::{train_bbpe, BbpeVocab};
use ctal::CtalRng;
use rand::SeedableRng;

fn labeled(utts: &[SynthUtterance], vocab: &BbpeVocab) -> ctal::Result<Vec<LabeledExample>> {
    let frontend = FrontendConfig::default();
    utts.iter()
        .map(|u| {
            Ok(LabeledExample {
                pair: PairExample {
                    id: u.id.clone(),
                    tokens: vocab.encode(&u.transcript).ids,
                    features: extract(&u.waveform, &frontend)?,
                    label: Some(u.label.clone()),
                },
                target: Target::Class(u.class),
            })
        })
        .collect()
}

fn main() -> ctal::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut train_cfg = SynthConfig::new(SynthKind::Emotion, 32);
    train_cfg.synonyms = 2;
    let mut test_cfg = train_cfg.clone();
    test_cfg.seed = 1;
    let (train_utts, test_utts) = (generate(&train_cfg)?, generate(&test_cfg)?);
    let vocab = train_bbpe(train_utts.iter().map(|u| u.transcript.as_str()), 400)?;
    let train = labeled(&train_utts, &vocab)?;
    let test = labeled(&test_utts, &vocab)?;

    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.dropout = 0.0;
    let model = CtalModel::new(cfg.clone(), &mut CtalRng::seed_from_u64(0))?;
    let pcfg = PretrainConfig {
        steps,
        batch_size: 8,
        lr: 1e-3,
        warmup_fraction: 0.05,
        checkpoint_every: 0,
        ..PretrainConfig::default()
    };
    let corpus: Vec<PairExample> = train.iter().map(|e| e.pair.clone()).collect();
    let report = run_pretraining(pcfg, &corpus, model, None)?;
    let ckpt = Checkpoint::new(cfg.to_pairs(), report.model.params);

    let head = TaskHead::Classification { classes: 4 };
    let (mut ft, load) = FinetuneModel::from_pretrained(&ckpt, head, &mut CtalRng::seed_from_u64(1))?;
    println!("loaded {} tensors, dropped {:?}", load.loaded.len(), load.dropped);
    let fcfg = FinetuneConfig {
        epochs: 10,
        lr: 1e-3,
        ..FinetuneConfig::default()
    };
    for (epoch, loss) in finetune(&mut ft, &train, &fcfg)?.iter().enumerate() {
        println!("epoch {epoch:2} loss {loss:.4}");
    }

    let pairs: Vec<PairExample> = test.iter().map(|e| e.pair.clone()).collect();
    let preds: Vec<usize> = infer(&ft, &pairs)?.iter().map(|r| argmax(&r.outputs)).collect();
    let golds: Vec<usize> = test_utts.iter().map(|u| u.class).collect();
    let (wa, ua) = wa_ua(&preds, &golds, 4)?;
    println!("test WA {wa:.3} UA {ua:.3}");
    for (u, p) in test_utts.iter().zip(&preds).take(6) {
        println!("  {:30} gold {:8} predicted {}", u.transcript, u.label, EMOTIONS[*p]);
    }
    Ok(())
}
