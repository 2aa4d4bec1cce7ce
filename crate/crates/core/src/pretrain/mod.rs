//! Masked language modeling plus masked cross-modal acoustic modeling.
//!
//! The objective is the unweighted sum `L = L_mlm + L_mcam`. MLM predicts
//! masked tokens from the text stream alone; MCAM reconstructs masked frames
//! from the audio stream, which also sees the full text through
//! cross-attention.

mod masking;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use masking::{
    apply_plans, plan_mcam, plan_mlm, segment_frames, CorruptedBatch, McamAction, McamPlan,
    MlmAction, MlmPlan, ReplacementMode, Segment, MAX_SEGMENT, MCAM_SELECT_FRACTION,
    MIN_SEGMENT, MLM_SELECT_PROB,
};

use crate::audio::FEATURE_DIM;
use crate::autograd::{Graph, Var};
use crate::data::PairExample;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{self, CtalModel, ModelConfig, PairBatch};
use crate::optim::{adam_step, lr_linear_warmup_decay, AdamConfig, OptimizerState};
use crate::params::{Binder, ParamGrads, ParamStore};
use crate::seed::{hash_id, rng_for};
use crate::tensor::{Real, Tensor};
use crate::CtalRng;

/// Cross-entropy over labeled positions, summed and divided by `norm`.
///
/// Only labeled rows go through the head. Returns `None` when nothing is labeled.
pub fn mlm_loss<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    text_final: Var,
    labels: &[Option<usize>],
    norm: f64,
) -> Result<Option<Var>> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let h = g.gather_rows(text_final, &rows)?;
    let logits = model::mlm_logits(cfg, g, p, h)?;
    let targets: Vec<Option<usize>> = rows.iter().map(|&i| labels[i]).collect();
    g.cross_entropy(logits, &targets, norm).map(Some)
}

/// L1 between predicted and original features over masked frames, divided by `norm`.
pub fn mcam_loss<R: Real>(
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    audio_final: Var,
    original: &[f32],
    masked: &[bool],
    norm: f64,
) -> Result<Option<Var>> {
    let rows: Vec<usize> = (0..masked.len()).filter(|&i| masked[i]).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let h = g.gather_rows(audio_final, &rows)?;
    let pred = model::mcam_prediction(g, p, h)?;
    let mut target = Vec::with_capacity(rows.len() * FEATURE_DIM);
    for &r in &rows {
        target.extend(
            original[r * FEATURE_DIM..(r + 1) * FEATURE_DIM]
                .iter()
                .map(|&v| R::from_f64c(v as f64)),
        );
    }
    let target = Tensor::from_vec(vec![rows.len(), FEATURE_DIM], target)?;
    g.l1_rows(pred, &target, &vec![true; rows.len()], norm).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub total: f64,
    pub mlm: f64,
    pub mcam: f64,
}

struct ItemResult<R> {
    mlm: f64,
    mcam: f64,
    grads: Option<ParamGrads<R>>,
}

fn item_losses<R: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<R>,
    c: &CorruptedBatch,
    i: usize,
    norms: (f64, f64),
    with_grads: bool,
    mut rng: Option<CtalRng>,
) -> Result<ItemResult<R>> {
    let mut g = Graph::new();
    let mut p = if with_grads {
        Binder::new(params)
    } else {
        Binder::frozen(params)
    };
    let item = c.batch.item(i);
    let text = model::encode_text(cfg, &mut g, &mut p, item.tokens, item.text_mask, rng.as_mut())?;
    let mlm = mlm_loss(cfg, &mut g, &mut p, text.output(), &c.mlm_labels[i], norms.0)?;
    let mcam = if c.mcam_mask[i].iter().any(|&m| m) {
        let a0 = model::embed_audio(cfg, &mut g, &mut p, item.audio)?;
        let audio = model::audio_encoder_forward(
            cfg,
            &mut g,
            &mut p,
            a0,
            text.output(),
            item.audio_mask,
            item.text_mask,
            rng.as_mut(),
        )?;
        mcam_loss(
            &mut g,
            &mut p,
            audio.output(),
            &c.original_audio[i],
            &c.mcam_mask[i],
            norms.1,
        )?
    } else {
        None
    };
    let value = |v: Option<Var>, g: &Graph<R>| v.map_or(0.0, |v| g.value(v).item().to_f64c());
    let (mlm_v, mcam_v) = (value(mlm, &g), value(mcam, &g));
    let grads = if with_grads {
        let mut out = ParamGrads::zeros_like(params);
        let loss = match (mlm, mcam) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (a, b) => a.or(b),
        };
        if let Some(loss) = loss {
            let grads = g.backward(loss)?;
            p.collect(&grads, &mut out)?;
        }
        Some(out)
    } else {
        None
    };
    Ok(ItemResult {
        mlm: mlm_v,
        mcam: mcam_v,
        grads,
    })
}

/// Batch losses (means over all labeled tokens / masked feature values in the
/// batch) and optionally their gradients.
///
/// Items run in parallel, each on its own graph; results are reduced in item
/// order so the outcome does not depend on scheduling. `dropout_seed = None`
/// disables dropout.
pub fn pretrain_losses<R: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<R>,
    c: &CorruptedBatch,
    dropout_seed: Option<u64>,
    with_grads: bool,
) -> Result<(PretrainLosses, Option<ParamGrads<R>>)> {
    let mlm_norm = c.mlm_count().max(1) as f64;
    let mcam_norm = (c.mcam_frame_count() * FEATURE_DIM).max(1) as f64;
    let results: Vec<Result<ItemResult<R>>> = (0..c.batch.len())
        .into_par_iter()
        .map(|i| {
            let rng = dropout_seed.map(|s| rng_for(&[s, i as u64]));
            item_losses(cfg, params, c, i, (mlm_norm, mcam_norm), with_grads, rng)
        })
        .collect();
    let mut losses = PretrainLosses::default();
    let mut grads = with_grads.then(|| ParamGrads::zeros_like(params));
    for r in results {
        let r = r?;
        losses.mlm += r.mlm;
        losses.mcam += r.mcam;
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.accumulate(g)?;
        }
    }
    losses.total = losses.mlm + losses.mcam;
    Ok((losses, grads))
}

fn batch_diagnostics(c: &CorruptedBatch) -> String {
    let mut s = String::new();
    for i in 0..c.batch.len() {
        let item = c.batch.item(i);
        let _ = write!(
            s,
            " [item {i}: {} tokens, {} frames, {} labels, {} masked frames]",
            item.real_text_len(),
            item.real_audio_len(),
            c.mlm_labels[i].iter().filter(|l| l.is_some()).count(),
            c.mcam_mask[i].iter().filter(|&&m| m).count(),
        );
    }
    s
}

/// One optimizer update on a prepared batch.
pub fn pretrain_step(
    model: &mut CtalModel<f32>,
    optimizer: &mut OptimizerState<f32>,
    batch: &CorruptedBatch,
    lr: f64,
    max_grad_norm: f64,
    dropout_seed: Option<u64>,
) -> Result<PretrainLosses> {
    let (losses, grads) = pretrain_losses(&model.config, &model.params, batch, dropout_seed, true)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "pre-training loss (mlm {}, mcam {}):{}",
            losses.mlm,
            losses.mcam,
            batch_diagnostics(batch)
        )));
    }
    let mut grads = grads.expect("gradients requested");
    let norm = grads.global_norm();
    if max_grad_norm > 0.0 && norm > max_grad_norm {
        grads.scale(max_grad_norm / norm);
    }
    adam_step(&mut model.params, &grads, optimizer, lr)?;
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub replacement: ReplacementMode,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1_000_000,
            batch_size: 16,
            lr: 5e-5,
            warmup_fraction: 0.1,
            seed: 0,
            replacement: ReplacementMode::Contiguous,
            max_grad_norm: 1.0,
            checkpoint_every: 10_000,
        }
    }
}

/// Fresh MLM and MCAM plans for one visit of an utterance.
pub fn plan_example(
    ex: &PairExample,
    vocab_size: usize,
    max_text_len: usize,
    max_audio_frames: usize,
    mode: ReplacementMode,
    seed: u64,
    epoch: u64,
) -> (MlmPlan, McamPlan) {
    let mut rng = rng_for(&[seed, hash_id(&ex.id), epoch]);
    let n = ex.tokens.len().min(max_text_len);
    let mlm = plan_mlm(&ex.tokens[..n], vocab_size, &mut rng);
    let frames = ex.features.num_frames.min(max_audio_frames);
    let mcam = plan_mcam(frames, mode, &mut rng);
    (mlm, mcam)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: PretrainLosses,
}

/// Streaming pre-training over an in-memory corpus, one shuffled epoch at a time.
pub struct Pretrainer<'a> {
    pub model: CtalModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub config: PretrainConfig,
    corpus: &'a [PairExample],
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    step: u64,
}

impl<'a> Pretrainer<'a> {
    pub fn new(model: CtalModel<f32>, config: PretrainConfig, corpus: &'a [PairExample]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let optimizer = OptimizerState::new(&model.params, AdamConfig::adam());
        let mut t = Self {
            model,
            optimizer,
            config,
            corpus,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
        };
        t.shuffle();
        Ok(t)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.corpus.len()).collect();
        self.order
            .shuffle(&mut rng_for(&[self.config.seed, 0x5f1e, self.epoch]));
        self.cursor = 0;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Next batch with fresh masks.
    pub fn next_batch(&mut self) -> Result<CorruptedBatch> {
        let cfg = self.model.config.clone();
        let mut picked = Vec::with_capacity(self.config.batch_size);
        let mut plans = (Vec::new(), Vec::new());
        while picked.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            let ex = &self.corpus[self.order[self.cursor]];
            self.cursor += 1;
            let (m, a) = plan_example(
                ex,
                cfg.vocab_size,
                cfg.max_text_len,
                cfg.max_audio_frames,
                self.config.replacement,
                self.config.seed,
                self.epoch,
            );
            plans.0.push(m);
            plans.1.push(a);
            picked.push(ex);
        }
        let pairs: Vec<(&[u32], &_)> = picked.iter().map(|e| (&e.tokens[..], &e.features)).collect();
        let batch = PairBatch::from_examples(&pairs, cfg.max_text_len, cfg.max_audio_frames)?;
        apply_plans(&batch, &plans.0, &plans.1)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = (self.config.steps as f64 * self.config.warmup_fraction).round() as u64;
        lr_linear_warmup_decay(step, warmup, self.config.steps, self.config.lr)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        self.step += 1;
        let lr = self.lr_at(self.step);
        let seed = (self.model.config.dropout > 0.0).then(|| {
            crate::seed::derive_seed(&[self.config.seed, 0xd0, self.step])
        });
        let losses = pretrain_step(
            &mut self.model,
            &mut self.optimizer,
            &batch,
            lr,
            self.config.max_grad_norm,
            seed,
        )?;
        Ok(StepRecord {
            step: self.step,
            lr,
            losses,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut config = self.model.config.to_pairs();
        config.insert("pretrain.step".into(), self.step.to_string());
        config.insert("pretrain.seed".into(), self.config.seed.to_string());
        Checkpoint::new(config, self.model.params.clone())
    }
}

pub const LOSS_CSV_HEADER: &str = "step,lr,total,mlm,mcam";

pub fn loss_csv_line(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{}",
        r.step, r.lr, r.losses.total, r.losses.mlm, r.losses.mcam
    )
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub model: CtalModel<f32>,
}

/// Runs `config.steps` updates. With `out_dir`, writes `loss.csv`, periodic
/// `checkpoint-<step>.ckpt` files and a final `model.ckpt`.
pub fn run_pretraining(
    config: PretrainConfig,
    corpus: &[PairExample],
    model: CtalModel<f32>,
    out_dir: Option<&Path>,
) -> Result<PretrainReport> {
    let mut trainer = Pretrainer::new(model, config, corpus)?;
    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    let mut report = PretrainReport {
        records: Vec::new(),
        checkpoints: Vec::new(),
        model: trainer.model.clone(),
    };
    let total = trainer.config.steps;
    let every = trainer.config.checkpoint_every;
    let log_every = (total / 20).max(1);
    for _ in 0..total {
        let rec = trainer.step()?;
        csv.push_str(&loss_csv_line(&rec));
        csv.push('\n');
        if rec.step % log_every == 0 || rec.step == 1 {
            log::info!(
                "step {} lr {:.3e} total {:.4} mlm {:.4} mcam {:.4}",
                rec.step,
                rec.lr,
                rec.losses.total,
                rec.losses.mlm,
                rec.losses.mcam
            );
        }
        if let Some(dir) = out_dir {
            if every > 0 && rec.step % every == 0 && rec.step < total {
                let path = dir.join(format!("checkpoint-{:08}.ckpt", rec.step));
                trainer.checkpoint().save(&path)?;
                report.checkpoints.push(path);
            }
        }
        report.records.push(rec);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("loss.csv");
        std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("model.ckpt");
        trainer.checkpoint().save(&path)?;
        report.checkpoints.push(path);
    }
    report.model = trainer.model;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AcousticFeatureSequence;
    use crate::tokenizer::{BOS, EOS};
    use rand::{Rng, SeedableRng};

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn_dim: 16,
            vocab_size: 30,
            max_text_len: 16,
            max_audio_frames: 64,
            dropout: 0.0,
            ..ModelConfig::tiny(30)
        }
    }

    fn example(id: &str, frames: usize, seed: u64) -> PairExample {
        let mut rng = CtalRng::seed_from_u64(seed);
        let feats = (0..frames * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        PairExample {
            id: id.into(),
            tokens: vec![BOS, 5, 6, 7, 8, 9, 10, EOS],
            features: AcousticFeatureSequence::new(feats, frames).unwrap(),
            label: None,
        }
    }

    fn corrupted(mcam: bool) -> CorruptedBatch {
        let ex = [example("a", 30, 1), example("b", 25, 2)];
        let pairs: Vec<(&[u32], &_)> = ex.iter().map(|e| (&e.tokens[..], &e.features)).collect();
        let batch = PairBatch::from_examples(&pairs, 16, 64).unwrap();
        let mlm = vec![
            MlmPlan {
                positions: vec![2, 4],
                actions: vec![MlmAction::Mask, MlmAction::Keep],
                labels: vec![6, 8],
            },
            MlmPlan {
                positions: vec![1],
                actions: vec![MlmAction::Random(20)],
                labels: vec![5],
            },
        ];
        let mut rng = CtalRng::seed_from_u64(3);
        let plans = if mcam {
            vec![
                plan_mcam(30, ReplacementMode::Contiguous, &mut rng),
                plan_mcam(25, ReplacementMode::Contiguous, &mut rng),
            ]
        } else {
            vec![McamPlan::default(); 2]
        };
        apply_plans(&batch, &mlm, &plans).unwrap()
    }

    #[test]
    fn total_equals_mlm_without_mcam() {
        let m: CtalModel<f32> = CtalModel::new(cfg(), &mut CtalRng::seed_from_u64(0)).unwrap();
        let (l, _) = pretrain_losses(&m.config, &m.params, &corrupted(false), None, false).unwrap();
        assert_eq!(l.mcam, 0.0);
        assert_eq!(l.total, l.mlm);
        let (l, _) = pretrain_losses(&m.config, &m.params, &corrupted(true), None, false).unwrap();
        assert!(l.mcam > 0.0);
        assert_eq!(l.total, l.mlm + l.mcam);
    }

    #[test]
    fn losses_are_reproducible() {
        let m: CtalModel<f32> = CtalModel::new(cfg(), &mut CtalRng::seed_from_u64(0)).unwrap();
        let c = corrupted(true);
        let a = pretrain_losses(&m.config, &m.params, &c, None, true).unwrap();
        let b = pretrain_losses(&m.config, &m.params, &c, None, true).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.unwrap(), b.1.unwrap());
        assert!(a.0.total.is_finite());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m: CtalModel<f64> = CtalModel::new(cfg(), &mut CtalRng::seed_from_u64(0)).unwrap();
        for name in ["mlm_head.decoder.weight", "mlm_head.decoder.bias"] {
            let t = m.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let (l, _) = pretrain_losses(&m.config, &m.params, &corrupted(false), None, false).unwrap();
        assert!((l.mlm - 30f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_matches_naive_cross_entropy() {
        let m: CtalModel<f64> = CtalModel::new(cfg(), &mut CtalRng::seed_from_u64(4)).unwrap();
        let c = corrupted(false);
        let (l, _) = pretrain_losses(&m.config, &m.params, &c, None, false).unwrap();
        let mut total = 0.0;
        for i in 0..2 {
            let mut g = Graph::new();
            let mut p = Binder::frozen(&m.params);
            let item = c.batch.item(i);
            let text = model::encode_text(&m.config, &mut g, &mut p, item.tokens, item.text_mask, None).unwrap();
            let logits = model::mlm_logits(&m.config, &mut g, &mut p, text.output()).unwrap();
            let logits = g.value(logits);
            for (r, label) in c.mlm_labels[i].iter().enumerate() {
                let Some(t) = label else { continue };
                let row = logits.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                total += z.ln() - row[*t];
            }
        }
        assert!((l.mlm - total / 3.0).abs() < 1e-10);
    }

    #[test]
    fn mcam_loss_matches_masked_l1_oracle() {
        let m: CtalModel<f64> = CtalModel::new(cfg(), &mut CtalRng::seed_from_u64(5)).unwrap();
        let c = corrupted(true);
        let (l, _) = pretrain_losses(&m.config, &m.params, &c, None, false).unwrap();
        let mut total = 0.0;
        for i in 0..2 {
            let mut g = Graph::new();
            let mut p = Binder::frozen(&m.params);
            let enc = model::encode(&m.config, &mut g, &mut p, &c.batch.item(i), None).unwrap();
            let pred = model::mcam_prediction(&mut g, &mut p, enc.audio.output()).unwrap();
            let pred = g.value(pred);
            for (t, &masked) in c.mcam_mask[i].iter().enumerate() {
                if masked {
                    for d in 0..FEATURE_DIM {
                        total += (pred.at(t, d) - c.original_audio[i][t * FEATURE_DIM + d] as f64).abs();
                    }
                }
            }
        }
        let expected = total / (c.mcam_frame_count() * FEATURE_DIM) as f64;
        assert!((l.mcam - expected).abs() < 1e-10);
    }

    fn head_store(pred_bias: f32) -> (ParamStore<f64>, Vec<f32>) {
        let mut p = ParamStore::new();
        p.insert("mcam_head.weight", Tensor::zeros(vec![2, FEATURE_DIM]));
        let mut rng = CtalRng::seed_from_u64(8);
        let orig: Vec<f32> = (0..3 * FEATURE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bias = orig[FEATURE_DIM..2 * FEATURE_DIM]
            .iter()
            .map(|&v| (v + pred_bias) as f64)
            .collect();
        p.insert("mcam_head.bias", Tensor::from_vec(vec![FEATURE_DIM], bias).unwrap());
        (p, orig)
    }

    #[test]
    fn mcam_loss_exact_and_offset() {
        for (offset, expected) in [(0.0f32, 0.0), (1.0, 1.0)] {
            let (store, orig) = head_store(offset);
            let mut g = Graph::new();
            let mut p = Binder::frozen(&store);
            let h = g.constant(Tensor::zeros(vec![3, 2]));
            let l = mcam_loss(&mut g, &mut p, h, &orig, &[false, true, false], FEATURE_DIM as f64)
                .unwrap()
                .unwrap();
            assert!((g.value(l).item() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn trainer_runs_and_is_deterministic() {
        let corpus: Vec<PairExample> = (0..3).map(|i| example(&format!("u{i}"), 40, i)).collect();
        let config = PretrainConfig {
            steps: 3,
            batch_size: 2,
            lr: 1e-3,
            checkpoint_every: 0,
            ..PretrainConfig::default()
        };
        let run = || {
            let m = CtalModel::new(cfg(), &mut CtalRng::seed_from_u64(0)).unwrap();
            run_pretraining(config.clone(), &corpus, m, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 3);
        assert_eq!(a.model.params, b.model.params);
    }
}
