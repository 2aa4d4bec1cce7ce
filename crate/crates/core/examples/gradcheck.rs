//! Compares tape gradients of a small two-stream model against central
//! finite differences in f64.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use ctal::audio::{AcousticFeatureSequence, FEATURE_DIM};
use ctal::model::{CtalModel, ModelConfig, PairBatch};
use ctal::pretrain::{apply_plans, plan_mcam, plan_mlm, pretrain_losses, MlmAction, MlmPlan, ReplacementMode};
use ctal::CtalRng;
use rand::{Rng, SeedableRng};

fn main() -> ctal::Result<()> {
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        ffn_dim: 16,
        dropout: 0.0,
        ..ModelConfig::tiny(40)
    };
    let mut rng = CtalRng::seed_from_u64(1);
    let model = CtalModel::<f64>::new(cfg.clone(), &mut rng)?;
    let tokens: Vec<u32> = [0].into_iter().chain((0..6).map(|_| rng.random_range(4..40))).chain([1]).collect();
    let feats = AcousticFeatureSequence::new((0..40 * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(), 40)?;
    let batch = PairBatch::from_examples(&[(&tokens[..], &feats)], 64, 256)?;
    let mut mlm = plan_mlm(&tokens, 40, &mut rng);
    if mlm.is_empty() {
        mlm = MlmPlan {
            positions: vec![2],
            actions: vec![MlmAction::Mask],
            labels: vec![tokens[2]],
        };
    }
    let mcam = plan_mcam(40, ReplacementMode::Contiguous, &mut rng);
    let corrupted = apply_plans(&batch, &[mlm], &[mcam])?;

    let (loss, grads) = pretrain_losses(&cfg, &model.params, &corrupted, None, true)?;
    let grads = grads.expect("requested");
    println!("loss {:.6} (mlm {:.6}, mcam {:.6})", loss.total, loss.mlm, loss.mcam);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, name) in model.params.names().iter().enumerate() {
        let j = 0;
        let mut p = model.params.clone();
        p.get_mut(name).unwrap().data_mut()[j] += h;
        let up = pretrain_losses(&cfg, &p, &corrupted, None, false)?.0.total;
        p.get_mut(name).unwrap().data_mut()[j] -= 2.0 * h;
        let down = pretrain_losses(&cfg, &p, &corrupted, None, false)?.0.total;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(i).data()[j];
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max(err);
        println!("{name:48} analytic {analytic:+.6e} numeric {numeric:+.6e} rel {err:.1e}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
