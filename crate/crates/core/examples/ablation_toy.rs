//! Pre-trained versus from-scratch fine-tuning on a keyword-transfer task.
//!
//! ```text
//! cargo run --release --example ablation_toy -- [pretrain_steps] [seeds]
//! ```

use ctal::audio::{extract, FrontendConfig};
use ctal::data::PairExample;
use ctal::finetune::{finetune, infer, FinetuneConfig, FinetuneModel, LabeledExample, TaskHead, Target};
use ctal::metrics::{argmax, wa_ua};
use ctal::model::checkpoint::Checkpoint;
use ctal::model::{CtalModel, ModelConfig};
use ctal::pretrain::{run_pretraining, PretrainConfig};
use ctal::synth::{keyword_transfer_corpus, SynthUtterance};
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

fn labeled(utts: &[SynthUtterance], vocab: &BbpeVocab) -> ctal::Result<Vec<LabeledExample>> {
    Ok(pairs(utts, vocab)?
        .into_iter()
        .zip(utts)
        .map(|(pair, u)| LabeledExample {
            pair,
            target: Target::Class(u.class),
        })
        .collect())
}

fn test_wa(model: &FinetuneModel<f32>, test: &[LabeledExample]) -> ctal::Result<(f64, f64)> {
    let pairs: Vec<PairExample> = test.iter().map(|e| e.pair.clone()).collect();
    let preds: Vec<usize> = infer(model, &pairs)?.iter().map(|r| argmax(&r.outputs)).collect();
    let golds: Vec<usize> = test
        .iter()
        .map(|e| match e.target {
            Target::Class(c) => c,
            Target::Score(_) => unreachable!(),
        })
        .collect();
    wa_ua(&preds, &golds, 4)
}

fn main() -> ctal::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(600);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);

    let mut gaps = Vec::new();
    for seed in 0..seeds {
        let corpus = keyword_transfer_corpus(seed, 4, 0.3)?;
        let text = corpus.unlabeled.iter().chain(&corpus.train).map(|u| u.transcript.as_str());
        let vocab = train_bbpe(text, 400)?;
        let unlabeled = pairs(&corpus.unlabeled, &vocab)?;
        let train = labeled(&corpus.train, &vocab)?;
        let test = labeled(&corpus.test, &vocab)?;

        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.dropout = 0.0;
        let model = CtalModel::new(cfg.clone(), &mut CtalRng::seed_from_u64(seed))?;
        let pcfg = PretrainConfig {
            steps,
            batch_size: 8,
            lr: 1e-3,
            warmup_fraction: 0.05,
            seed,
            checkpoint_every: 0,
            ..PretrainConfig::default()
        };
        let report = run_pretraining(pcfg, &unlabeled, model, None)?;
        let last = report.records.last().unwrap().losses;
        let ckpt = Checkpoint::new(cfg.to_pairs(), report.model.params.clone());

        let fcfg = FinetuneConfig {
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            seed,
            ..FinetuneConfig::default()
        };
        let head = TaskHead::Classification { classes: 4 };
        let (mut pre, _) = FinetuneModel::from_pretrained(&ckpt, head.clone(), &mut CtalRng::seed_from_u64(seed + 100))?;
        finetune(&mut pre, &train, &fcfg)?;
        let mut scratch = FinetuneModel::new(cfg, head, &mut CtalRng::seed_from_u64(seed + 100))?;
        finetune(&mut scratch, &train, &fcfg)?;
        let (wa_pre, _) = test_wa(&pre, &test)?;
        let (wa_scr, _) = test_wa(&scratch, &test)?;
        let (tr_pre, _) = test_wa(&pre, &train)?;
        let (tr_scr, _) = test_wa(&scratch, &train)?;
        println!(
            "seed {seed}: pretrain mlm {:.3} mcam {:.3} | train acc pre {tr_pre:.2} scratch {tr_scr:.2} | test WA pre {wa_pre:.3} scratch {wa_scr:.3}",
            last.mlm, last.mcam
        );
        gaps.push(wa_pre - wa_scr);
    }
    gaps.sort_by(f64::total_cmp);
    println!("median WA gain {:.3}", gaps[gaps.len() / 2]);
    Ok(())
}
