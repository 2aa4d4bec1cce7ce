//! Fine-tuning: pooling fusion of the two streams, the orthogonal
//! regularizer, task heads, the training loop and inference.
//!
//! ```text
//! h_fuse = (h_attn_a + h_attn_w) ⊕ (h_max_a + h_max_w)
//! L      = L_task + λ · ( |cos(h_attn_a, h_attn_w)| + |cos(h_max_a, h_max_w)| )
//! ```
//!
//! `h_attn_w` is the final state of `<s>`; `h_attn_a` is attention pooling
//! over the audio stream; both `h_max` are max pooling over real positions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::PairExample;
use crate::error::{Error, Result};
use crate::model::checkpoint::{transfer, Checkpoint, LoadReport};
use crate::model::{
    self, backbone_specs, init_params, Encoding, Init, ModelConfig, PairBatch, ParamSpec,
    PRETRAIN_HEAD_PREFIXES,
};
use crate::optim::{adam_step, lr_cosine_anneal, AdamConfig, OptimizerState};
use crate::params::{Binder, ParamGrads, ParamStore};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor};
use crate::CtalRng;

/// Parameters created fresh at fine-tuning.
pub const FRESH_PREFIXES: [&str; 2] = ["fusion.", "task_head."];

/// Softmax(tanh(H W) v) over unmasked rows, then the weighted row sum: `[1 × d]`.
pub fn attention_pool<R: Real>(
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    prefix: &str,
    h: Var,
    mask: &[bool],
) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("attention pooling over fully masked rows".into()));
    }
    let w = p.get(g, &format!("{prefix}.weight"))?;
    let v = p.get(g, &format!("{prefix}.vector"))?;
    let proj = g.matmul(h, w)?;
    let proj = g.tanh(proj);
    let scores = g.matmul(proj, v)?;
    let scores = g.transpose(scores)?;
    let weights = g.softmax_rows(scores, Some(mask))?;
    g.matmul(weights, h)
}

/// Per-column max over unmasked rows: `[1 × d]`.
pub fn max_pool<R: Real>(g: &mut Graph<R>, h: Var, mask: &[bool]) -> Result<Var> {
    g.max_pool_rows(h, Some(mask))
}

/// `(attn_a + attn_w) ⊕ (max_a + max_w)`: `[1 × 2d]`.
pub fn fuse<R: Real>(g: &mut Graph<R>, attn_a: Var, attn_w: Var, max_a: Var, max_w: Var) -> Result<Var> {
    let a = g.add(attn_a, attn_w)?;
    let m = g.add(max_a, max_w)?;
    g.concat_cols(&[a, m])
}

fn abs_cosine<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Option<Var>> {
    let norm = |g: &Graph<R>, v: Var| g.value(v).data().iter().map(|x| x.to_f64c().powi(2)).sum::<f64>();
    if norm(g, a) == 0.0 || norm(g, b) == 0.0 {
        log::warn!("orthogonal loss: zero vector, pair contributes 0");
        return Ok(None);
    }
    let bt = g.transpose(b)?;
    let dot = g.matmul(a, bt)?;
    let dot = g.reshape(dot, &[1])?;
    let aa = g.mul(a, a)?;
    let na = g.sum(aa);
    let na = g.sqrt(na);
    let bb = g.mul(b, b)?;
    let nb = g.sum(bb);
    let nb = g.sqrt(nb);
    let den = g.mul(na, nb)?;
    let c = g.div(dot, den)?;
    Ok(Some(g.abs(c)))
}

/// `|cos(attn_a, attn_w)| + |cos(max_a, max_w)|`, in `[0, 2]`. `None` only when
/// both pairs are degenerate.
pub fn orthogonal_loss<R: Real>(
    g: &mut Graph<R>,
    attn_a: Var,
    attn_w: Var,
    max_a: Var,
    max_w: Var,
) -> Result<Option<Var>> {
    let x = abs_cosine(g, attn_a, attn_w)?;
    let y = abs_cosine(g, max_a, max_w)?;
    Ok(match (x, y) {
        (Some(x), Some(y)) => Some(g.add(x, y)?),
        (x, y) => x.or(y),
    })
}

/// The pooled vectors and their fusion for one example.
#[derive(Debug, Clone, Copy)]
pub struct FusedRepresentation {
    pub attn_a: Var,
    pub max_a: Var,
    pub attn_w: Var,
    pub max_w: Var,
    pub fused: Var,
}

pub fn fused_forward<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    item: &model::PairItem<'_>,
    rng: Option<&mut CtalRng>,
) -> Result<(Encoding, FusedRepresentation)> {
    let enc = model::encode(cfg, g, p, item, rng)?;
    let t = g.value(enc.text.output()).dims2().0;
    let a = g.value(enc.audio.output()).dims2().0;
    let text_mask = &item.text_mask[..t];
    let audio_mask = &item.audio_mask[..a];
    let attn_a = attention_pool(g, p, "fusion.attn_pool", enc.audio.output(), audio_mask)?;
    let max_a = max_pool(g, enc.audio.output(), audio_mask)?;
    let attn_w = g.slice_rows(enc.text.output(), 0, 1)?;
    let max_w = max_pool(g, enc.text.output(), text_mask)?;
    let fused = fuse(g, attn_a, attn_w, max_a, max_w)?;
    Ok((
        enc,
        FusedRepresentation {
            attn_a,
            max_a,
            attn_w,
            max_w,
            fused,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskHead {
    Classification { classes: usize },
    Regression,
    Speaker { speakers: usize },
}

impl TaskHead {
    pub fn outputs(&self) -> usize {
        match self {
            Self::Classification { classes } => *classes,
            Self::Regression => 1,
            Self::Speaker { speakers } => *speakers,
        }
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let (kind, n) = match self {
            Self::Classification { classes } => ("classification", *classes),
            Self::Regression => ("regression", 1),
            Self::Speaker { speakers } => ("speaker", *speakers),
        };
        BTreeMap::from([
            ("head.kind".to_string(), kind.to_string()),
            ("head.outputs".to_string(), n.to_string()),
        ])
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let n: usize = pairs
            .get("head.outputs")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("checkpoint has no head.outputs".into()))?;
        match pairs.get("head.kind").map(String::as_str) {
            Some("classification") => Ok(Self::Classification { classes: n }),
            Some("regression") => Ok(Self::Regression),
            Some("speaker") => Ok(Self::Speaker { speakers: n }),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Fusion attention pooling plus the linear task layer on `h_fuse`.
pub fn head_specs(cfg: &ModelConfig, head: &TaskHead) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    vec![
        ("fusion.attn_pool.weight".into(), vec![d, d], Init::Normal),
        ("fusion.attn_pool.vector".into(), vec![d, 1], Init::Normal),
        ("task_head.weight".into(), vec![2 * d, head.outputs()], Init::Normal),
        ("task_head.bias".into(), vec![head.outputs()], Init::Zeros),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Score(f64),
}

/// Task loss plus `λ ·` orthogonal loss, each divided by `norm`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loss<R: Real>(
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    head: &TaskHead,
    rep: &FusedRepresentation,
    target: Target,
    lambda: f64,
    norm: f64,
) -> Result<Var> {
    let out = model::layers::linear(g, p, "task_head", rep.fused)?;
    let task = match (head, target) {
        (TaskHead::Regression, Target::Score(y)) => {
            let t = Tensor::from_vec(vec![1, 1], vec![R::from_f64c(y)])?;
            g.l1_rows(out, &t, &[true], norm)?
        }
        (TaskHead::Classification { .. } | TaskHead::Speaker { .. }, Target::Class(c)) => {
            g.cross_entropy(out, &[Some(c)], norm)?
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "target {target:?} does not match head {head:?}"
            )))
        }
    };
    if lambda == 0.0 {
        return Ok(task);
    }
    match orthogonal_loss(g, rep.attn_a, rep.attn_w, rep.max_a, rep.max_w)? {
        Some(orth) => {
            let orth = g.scale(orth, lambda / norm);
            g.add(task, orth)
        }
        None => Ok(task),
    }
}

/// Backbone plus fusion and task head.
#[derive(Debug, Clone)]
pub struct FinetuneModel<R> {
    pub config: ModelConfig,
    pub head: TaskHead,
    pub params: ParamStore<R>,
}

impl<R: Real> FinetuneModel<R> {
    pub fn new(config: ModelConfig, head: TaskHead, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if head.outputs() == 0 {
            return Err(Error::Config("task head needs at least one output".into()));
        }
        let specs: Vec<ParamSpec> = backbone_specs(&config)
            .into_iter()
            .chain(head_specs(&config, &head))
            .collect();
        let params = init_params(&specs, config.init_std, rng);
        Ok(Self {
            config,
            head,
            params,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut cfg = self.config.to_pairs();
        cfg.extend(self.head.to_pairs());
        Checkpoint::new(cfg, self.params.cast())
    }
}

impl FinetuneModel<f32> {
    /// Starts from pre-trained weights: MLM/MCAM heads are dropped, fusion and
    /// task head are fresh, everything else must match by name and shape.
    pub fn from_pretrained(ckpt: &Checkpoint, head: TaskHead, rng: &mut impl Rng) -> Result<(Self, LoadReport)> {
        let config = ModelConfig::from_pairs(&ckpt.config)?;
        let mut model = Self::new(config, head, rng)?;
        let report = transfer(&ckpt.params, &mut model.params, &PRETRAIN_HEAD_PREFIXES, &FRESH_PREFIXES)?;
        Ok((model, report))
    }

    /// Reloads a fine-tuned checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_pairs(&ckpt.config)?;
        let head = TaskHead::from_pairs(&ckpt.config)?;
        let specs: Vec<ParamSpec> = backbone_specs(&config)
            .into_iter()
            .chain(head_specs(&config, &head))
            .collect();
        for (name, shape, _) in &specs {
            let t = ckpt.params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("checkpoint tensor", t.shape(), shape));
            }
        }
        if ckpt.params.len() != specs.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, fine-tuned model expects {}",
                ckpt.params.len(),
                specs.len()
            )));
        }
        Ok(Self {
            config,
            head,
            params: ckpt.params.clone(),
        })
    }
}

/// A pair with its supervised target.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub pair: PairExample,
    pub target: Target,
}

fn single_batch(cfg: &ModelConfig, ex: &PairExample) -> Result<PairBatch> {
    PairBatch::from_examples(&[(&ex.tokens[..], &ex.features)], cfg.max_text_len, cfg.max_audio_frames)
}

/// Mean loss over `batch` and its gradient.
pub fn batch_loss<R: Real>(
    model: &FinetuneModel<R>,
    batch: &[&LabeledExample],
    lambda: f64,
    dropout_seed: Option<u64>,
    with_grads: bool,
) -> Result<(f64, Option<ParamGrads<R>>)> {
    let norm = batch.len() as f64;
    let results: Vec<Result<(f64, Option<ParamGrads<R>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let pb = single_batch(&model.config, &ex.pair)?;
            let mut g = Graph::new();
            let mut p = if with_grads {
                Binder::new(&model.params)
            } else {
                Binder::frozen(&model.params)
            };
            let mut rng = dropout_seed.map(|s| rng_for(&[s, i as u64]));
            let (_, rep) = fused_forward(&model.config, &mut g, &mut p, &pb.item(0), rng.as_mut())?;
            let loss = finetune_loss(&mut g, &mut p, &model.head, &rep, ex.target, lambda, norm)?;
            let value = g.value(loss).item().to_f64c();
            let grads = if with_grads {
                let mut out = ParamGrads::zeros_like(&model.params);
                p.collect(&g.backward(loss)?, &mut out)?;
                Some(out)
            } else {
                None
            };
            Ok((value, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = with_grads.then(|| ParamGrads::zeros_like(&model.params));
    for r in results {
        let (v, g) = r?;
        total += v;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g.as_ref()) {
            acc.accumulate(g)?;
        }
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Orthogonal-loss weight λ.
    pub lambda: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 1e-5,
            weight_decay: 0.01,
            lambda: 1.0,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

/// AdamW with cosine annealing to zero over all steps. Returns mean loss per epoch.
pub fn finetune(model: &mut FinetuneModel<f32>, train: &[LabeledExample], cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = OptimizerState::new(&model.params, AdamConfig::adamw(cfg.weight_decay));
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let mut step = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(&[cfg.seed, 0xf1e, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = (model.config.dropout > 0.0).then(|| crate::seed::derive_seed(&[cfg.seed, 0xd0, step]));
            let (loss, grads) = batch_loss(model, &batch, cfg.lambda, seed, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
            }
            let mut grads = grads.expect("gradients requested");
            let norm = grads.global_norm();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                grads.scale(cfg.max_grad_norm / norm);
            }
            let lr = lr_cosine_anneal(step, total, cfg.lr, 0.0);
            adam_step(&mut model.params, &grads, &mut opt, lr)?;
            step += 1;
            epoch_loss += loss * batch.len() as f64;
        }
        let mean = epoch_loss / train.len() as f64;
        log::info!("epoch {} loss {:.4}", epoch + 1, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Head output and fused representation for one example, dropout off.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub outputs: Vec<f32>,
    pub embedding: Vec<f32>,
}

pub fn infer<R: Real>(model: &FinetuneModel<R>, examples: &[PairExample]) -> Result<Vec<Inference>> {
    examples
        .par_iter()
        .map(|ex| {
            let pb = single_batch(&model.config, ex)?;
            let mut g = Graph::new();
            let mut p = Binder::frozen(&model.params);
            let (_, rep) = fused_forward(&model.config, &mut g, &mut p, &pb.item(0), None)?;
            let out = model::layers::linear(&mut g, &mut p, "task_head", rep.fused)?;
            let f32s = |t: &Tensor<R>| t.data().iter().map(|v| v.to_f64c() as f32).collect();
            Ok(Inference {
                outputs: f32s(g.value(out)),
                embedding: f32s(g.value(rep.fused)),
            })
        })
        .collect()
}

/// `h_fuse` with dropout disabled: the identity embedding for verification.
pub fn extract_identity_embedding<R: Real>(model: &FinetuneModel<R>, pair: &PairExample) -> Result<Vec<f32>> {
    Ok(infer(model, std::slice::from_ref(pair))?.remove(0).embedding)
}

/// Sorted class names and index lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub names: Vec<String>,
}

impl LabelSet {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut names: Vec<String> = labels.into_iter().map(str::to_string).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map_err(|_| Error::Config(format!("unknown label {name:?}")))
    }

    pub fn to_config_value(&self) -> String {
        self.names.join(",")
    }

    pub fn from_config_value(s: &str) -> Self {
        Self {
            names: s.split(',').map(str::to_string).collect(),
        }
    }
}

/// Attaches targets to pairs according to the head kind.
pub fn label_examples(pairs: Vec<PairExample>, head: &TaskHead, labels: Option<&LabelSet>) -> Result<Vec<LabeledExample>> {
    pairs
        .into_iter()
        .map(|pair| {
            let raw = pair
                .label
                .clone()
                .ok_or_else(|| Error::Config(format!("example {} has no label", pair.id)))?;
            let target = match head {
                TaskHead::Regression => Target::Score(
                    raw.parse()
                        .map_err(|_| Error::Config(format!("label {raw:?} is not a number")))?,
                ),
                _ => {
                    let set = labels.ok_or_else(|| Error::Config("class labels need a label set".into()))?;
                    let c = set.index(&raw)?;
                    if c >= head.outputs() {
                        return Err(Error::LabelOutOfRange {
                            label: c,
                            classes: head.outputs(),
                        });
                    }
                    Target::Class(c)
                }
            };
            Ok(LabeledExample { pair, target })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{AcousticFeatureSequence, FEATURE_DIM};
    use crate::tokenizer::{BOS, EOS};
    use rand::SeedableRng;

    fn vars(g: &mut Graph<f64>, rows: &[&[f64]]) -> Vec<Var> {
        rows.iter()
            .map(|r| g.constant(Tensor::from_vec(vec![1, r.len()], r.to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn fuse_layout() {
        let mut g = Graph::new();
        let v = vars(&mut g, &[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0], &[1.0, 1.0]]);
        let f = fuse(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 1.0, 3.0, 3.0]);
        let swapped = fuse(&mut g, v[1], v[0], v[3], v[2]).unwrap();
        assert_eq!(g.value(swapped), g.value(f));
    }

    #[test]
    fn orthogonal_loss_extremes() {
        let mut g = Graph::new();
        let v = vars(&mut g, &[&[1.0, 2.0], &[0.0, 3.0], &[-2.0, 1.0]]);
        let same = orthogonal_loss(&mut g, v[0], v[0], v[1], v[1]).unwrap().unwrap();
        assert!((g.value(same).item() - 2.0).abs() < 1e-12);
        let orth = orthogonal_loss(&mut g, v[0], v[2], v[0], v[2]).unwrap().unwrap();
        assert!(g.value(orth).item().abs() < 1e-12);
        let z = vars(&mut g, &[&[0.0, 0.0]])[0];
        let half = orthogonal_loss(&mut g, z, v[0], v[0], v[0]).unwrap().unwrap();
        assert!((g.value(half).item() - 1.0).abs() < 1e-12);
        assert!(orthogonal_loss(&mut g, z, v[0], z, v[0]).unwrap().is_none());
    }

    fn pool_store(d: usize) -> ParamStore<f64> {
        let mut rng = CtalRng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert("pool.weight", crate::params::normal_init(&[d, d], 1.0, &mut rng));
        s.insert("pool.vector", crate::params::normal_init(&[d, 1], 1.0, &mut rng));
        s
    }

    #[test]
    fn attention_pool_matches_loop() {
        let d = 3;
        let store = pool_store(d);
        let rows = [[0.5, -1.0, 2.0], [1.5, 0.2, -0.3], [9.0, 9.0, 9.0], [-0.7, 0.1, 0.4]];
        let mask = [true, true, false, true];
        let h = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let hv = g.constant(h);
        let out = attention_pool(&mut g, &mut p, "pool", hv, &mask).unwrap();

        let w = store.get("pool.weight").unwrap();
        let v = store.get("pool.vector").unwrap();
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| {
                (0..d)
                    .map(|j| (0..d).map(|k| r[k] * w.at(k, j)).sum::<f64>().tanh() * v.data()[j])
                    .sum()
            })
            .collect();
        let exps: Vec<f64> = scores.iter().zip(&mask).map(|(s, &m)| if m { s.exp() } else { 0.0 }).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..d {
            let expected: f64 = rows.iter().zip(&exps).map(|(r, e)| r[c] * e / z).sum();
            assert!((g.value(out).data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pools_of_single_or_identical_rows() {
        let store = pool_store(2);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let one = g.constant(Tensor::from_vec(vec![1, 2], vec![0.3, -0.4]).unwrap());
        let a = attention_pool(&mut g, &mut p, "pool", one, &[true]).unwrap();
        let m = max_pool(&mut g, one, &[true]).unwrap();
        assert_eq!(g.value(a).data(), &[0.3, -0.4]);
        assert_eq!(g.value(m).data(), &[0.3, -0.4]);
        let same = g.constant(Tensor::from_vec(vec![3, 2], vec![0.3, -0.4, 0.3, -0.4, 0.3, -0.4]).unwrap());
        let a = attention_pool(&mut g, &mut p, "pool", same, &[true; 3]).unwrap();
        for (x, y) in g.value(a).data().iter().zip([0.3, -0.4]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(attention_pool(&mut g, &mut p, "pool", same, &[false; 3]).is_err());
        assert!(max_pool(&mut g, same, &[false; 3]).is_err());
    }

    #[test]
    fn masked_rows_never_win_max_pool() {
        let mut g: Graph<f64> = Graph::new();
        let h = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 1e9, 1e9]).unwrap());
        let m = max_pool(&mut g, h, &[true, false]).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 2.0]);
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn_dim: 16,
            vocab_size: 30,
            max_text_len: 16,
            max_audio_frames: 32,
            dropout: 0.0,
            ..ModelConfig::tiny(30)
        }
    }

    fn pair(seed: u64) -> PairExample {
        let mut rng = CtalRng::seed_from_u64(seed);
        let frames = 6;
        let f = (0..frames * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        PairExample {
            id: format!("p{seed}"),
            tokens: vec![BOS, 5 + seed as u32 % 10, 7, EOS],
            features: AcousticFeatureSequence::new(f, frames).unwrap(),
            label: None,
        }
    }

    #[test]
    fn lambda_zero_is_task_loss_and_regression_can_be_exact() {
        let model: FinetuneModel<f64> =
            FinetuneModel::new(tiny(), TaskHead::Regression, &mut CtalRng::seed_from_u64(1)).unwrap();
        let ex = pair(1);
        let pred = infer(&model, std::slice::from_ref(&ex)).unwrap()[0].outputs[0] as f64;
        let exact = LabeledExample {
            pair: ex.clone(),
            target: Target::Score(pred),
        };
        let (l0, _) = batch_loss(&model, &[&exact], 0.0, None, false).unwrap();
        assert!(l0.abs() < 1e-6);
        let off = LabeledExample {
            pair: ex,
            target: Target::Score(pred + 2.0),
        };
        let (l0, _) = batch_loss(&model, &[&off], 0.0, None, false).unwrap();
        let (l1, _) = batch_loss(&model, &[&off], 1.0, None, false).unwrap();
        assert!((l0 - 2.0).abs() < 1e-6);
        assert!(l1 > l0 && l1 <= l0 + 2.0);
    }

    #[test]
    fn identity_embedding_is_deterministic_and_2d() {
        let model: FinetuneModel<f32> =
            FinetuneModel::new(tiny(), TaskHead::Speaker { speakers: 3 }, &mut CtalRng::seed_from_u64(2)).unwrap();
        let e1 = extract_identity_embedding(&model, &pair(3)).unwrap();
        let e2 = extract_identity_embedding(&model, &pair(3)).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 16);
        assert!((crate::metrics::cosine(&e1, &e1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_class_is_an_error() {
        let model: FinetuneModel<f64> =
            FinetuneModel::new(tiny(), TaskHead::Classification { classes: 2 }, &mut CtalRng::seed_from_u64(1)).unwrap();
        let bad = LabeledExample {
            pair: pair(1),
            target: Target::Class(5),
        };
        assert!(matches!(
            batch_loss(&model, &[&bad], 1.0, None, false),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn pretrained_weights_transfer_with_allowlist() {
        let pre: model::CtalModel<f32> = model::CtalModel::new(tiny(), &mut CtalRng::seed_from_u64(0)).unwrap();
        let ckpt = Checkpoint::new(pre.config.to_pairs(), pre.params.clone());
        let head = TaskHead::Classification { classes: 4 };
        let (ft, report) = FinetuneModel::from_pretrained(&ckpt, head, &mut CtalRng::seed_from_u64(1)).unwrap();
        assert!(report.unmatched.is_empty());
        assert!(report.dropped.iter().all(|n| n.starts_with("mlm_head.") || n.starts_with("mcam_head.")));
        assert_eq!(report.fresh.len(), 4);
        assert_eq!(ft.params.get("embeddings.token"), pre.params.get("embeddings.token"));
        let back = FinetuneModel::from_checkpoint(&ft.checkpoint()).unwrap();
        assert_eq!(back.params, ft.params);
        assert_eq!(back.head, ft.head);
    }

    #[test]
    fn training_reduces_loss() {
        let mut model: FinetuneModel<f32> =
            FinetuneModel::new(tiny(), TaskHead::Classification { classes: 2 }, &mut CtalRng::seed_from_u64(4)).unwrap();
        let train: Vec<LabeledExample> = (0..4)
            .map(|i| LabeledExample {
                pair: pair(i),
                target: Target::Class(i as usize % 2),
            })
            .collect();
        let cfg = FinetuneConfig {
            epochs: 15,
            batch_size: 2,
            lr: 3e-3,
            ..FinetuneConfig::default()
        };
        let hist = finetune(&mut model, &train, &cfg).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
    }
}
