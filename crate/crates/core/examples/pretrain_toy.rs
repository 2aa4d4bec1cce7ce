//! Pre-trains a tiny model on a 32-pair synthetic corpus and prints the loss curve.
//!
//! ```text
//! cargo run --release --example pretrain_toy -- [steps]
//! ```

use std::time::Instant;

use ctal::audio::{extract, FrontendConfig};
use ctal::data::PairExample;
use ctal::model::{CtalModel, ModelConfig};
use ctal::pretrain::{run_pretraining, PretrainConfig};
use ctal::synth::{generate, SynthConfig, SynthKind};
use ctal::tokenizer::train_bbpe;
use ctal::CtalRng;
use rand::SeedableRng;

fn main() -> ctal::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);

    let utts = generate(&SynthConfig::new(SynthKind::Emotion, 32))?;
    let vocab = train_bbpe(utts.iter().map(|u| u.transcript.as_str()), 400)?;
    let frontend = FrontendConfig::default();
    let corpus: Vec<PairExample> = utts
        .iter()
        .map(|u| {
            Ok(PairExample {
                id: u.id.clone(),
                tokens: vocab.encode(&u.transcript).ids,
                features: extract(&u.waveform, &frontend)?,
                label: Some(u.label.clone()),
            })
        })
        .collect::<ctal::Result<_>>()?;
    println!(
        "corpus: {} pairs, vocab {}, {} tokens and {} frames in the first pair",
        corpus.len(),
        vocab.len(),
        corpus[0].tokens.len(),
        corpus[0].features.num_frames
    );

    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.dropout = 0.0;
    let model = CtalModel::new(cfg, &mut CtalRng::seed_from_u64(0))?;
    let config = PretrainConfig {
        steps,
        batch_size: 8,
        lr: 1e-3,
        warmup_fraction: 0.05,
        checkpoint_every: 0,
        ..PretrainConfig::default()
    };
    let start = Instant::now();
    let report = run_pretraining(config, &corpus, model, None)?;
    let mean = |r: &[ctal::pretrain::StepRecord]| r.iter().map(|x| x.losses.total).sum::<f64>() / r.len() as f64;
    let n = report.records.len();
    let first = mean(&report.records[..10.min(n)]);
    let last = mean(&report.records[n.saturating_sub(10)..]);
    let tail = &report.records[n.saturating_sub(10)..];
    println!(
        "{steps} steps in {:.1}s: total {first:.4} -> {last:.4} ({:.1}% drop); last mlm {:.4} mcam {:.4}",
        start.elapsed().as_secs_f64(),
        100.0 * (1.0 - last / first),
        tail.iter().map(|r| r.losses.mlm).sum::<f64>() / tail.len() as f64,
        tail.iter().map(|r| r.losses.mcam).sum::<f64>() / tail.len() as f64,
    );
    Ok(())
}
