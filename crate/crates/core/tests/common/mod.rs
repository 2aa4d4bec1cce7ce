//! Shared helpers for the integration tests.
#![allow(dead_code)]

use ctal::audio::{AcousticFeatureSequence, FEATURE_DIM};
use ctal::autograd::{Graph, Var};
use ctal::data::PairExample;
use ctal::model::ModelConfig;
use ctal::params::{ParamGrads, ParamStore};
use ctal::tokenizer::{BOS, EOS};
use ctal::{CtalRng, Result, Tensor};
use rand::{Rng, SeedableRng};

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

pub fn random_tensor(shape: &[usize], rng: &mut CtalRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative error between the tape gradient and central differences of
/// `f` with respect to every element of every input.
pub fn check_op(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst = 0f64;
    for (i, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.shape().to_vec());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Scalar projection `Σ out ⊙ W` with a fixed random `W`, so any op output
/// becomes a loss whose gradient touches every element.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = CtalRng::seed_from_u64(seed);
    let w = random_tensor(g.value(out).shape(), &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Compares `loss`'s parameter gradient with central differences on
/// `per_tensor` evenly spread entries of every parameter. Returns the
/// largest relative error and the number of entries checked.
pub fn check_store(
    params: &ParamStore<f64>,
    per_tensor: usize,
    loss: impl Fn(&ParamStore<f64>, bool) -> (f64, Option<ParamGrads<f64>>),
) -> (f64, usize) {
    let (_, grads) = loss(params, true);
    let grads = grads.unwrap();
    let mut worst = 0f64;
    let mut checked = 0;
    for (i, name) in params.names().iter().enumerate() {
        let n = params.get(name).unwrap().numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|k| k * n / per_tensor + (k * 7919) % (n / per_tensor)).collect()
        };
        for j in picks {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[j] += STEP;
            let up = loss(&p, false).0;
            p.get_mut(name).unwrap().data_mut()[j] -= 2.0 * STEP;
            let down = loss(&p, false).0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.get(i).data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Small model for graph-level checks.
pub fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ffn_dim: 16,
        max_text_len: 16,
        max_audio_frames: 64,
        dropout: 0.0,
        ..ModelConfig::tiny(vocab)
    }
}

/// A pair of random content tokens and random feature frames.
pub fn random_pair(id: &str, words: usize, frames: usize, vocab: usize, seed: u64) -> PairExample {
    let mut rng = CtalRng::seed_from_u64(seed);
    let mut tokens = vec![BOS];
    tokens.extend((0..words).map(|_| rng.random_range(4..vocab as u32)));
    tokens.push(EOS);
    let feats = (0..frames * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    PairExample {
        id: id.into(),
        tokens,
        features: AcousticFeatureSequence::new(feats, frames).unwrap(),
        label: None,
    }
}

fn mask_pattern(n: usize, every: usize) -> Vec<bool> {
    (0..n).map(|i| i % every != every - 1).collect()
}

/// Gradient check of every differentiable tape op. Returns `(op, worst rel. err)`.
pub fn atomic_gradchecks() -> Vec<(&'static str, f64)> {
    let mut rng = CtalRng::seed_from_u64(11);
    let a23 = random_tensor(&[2, 3], &mut rng);
    let b23 = random_tensor(&[2, 3], &mut rng);
    let b34 = random_tensor(&[3, 4], &mut rng);
    let v3 = random_tensor(&[3], &mut rng);
    let pos23 = a23.map(|x| x.abs() + 0.5);
    let x45 = random_tensor(&[4, 5], &mut rng);
    let table = random_tensor(&[5, 3], &mut rng);
    let l35 = random_tensor(&[3, 5], &mut rng);
    let t35 = random_tensor(&[3, 5], &mut rng);
    let s1 = random_tensor(&[1], &mut rng);
    let p = project;
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut run = |name, inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        out.push((name, check_op(inputs, f)));
    };
    run("matmul", &[a23.clone(), b34.clone()], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        p(g, y, 1)
    });
    run("transpose", &[a23.clone()], &|g, v| {
        let y = g.transpose(v[0])?;
        p(g, y, 2)
    });
    run("add", &[a23.clone(), b23.clone()], &|g, v| {
        let y = g.add(v[0], v[1])?;
        p(g, y, 3)
    });
    run("sub", &[a23.clone(), b23.clone()], &|g, v| {
        let y = g.sub(v[0], v[1])?;
        p(g, y, 4)
    });
    run("mul", &[a23.clone(), b23.clone()], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        p(g, y, 5)
    });
    run("div", &[a23.clone(), pos23.clone()], &|g, v| {
        let y = g.div(v[0], v[1])?;
        p(g, y, 6)
    });
    run("add_bias", &[a23.clone(), v3.clone()], &|g, v| {
        let y = g.add_bias(v[0], v[1])?;
        p(g, y, 7)
    });
    run("scale", &[a23.clone()], &|g, v| {
        let y = g.scale(v[0], -1.7);
        p(g, y, 8)
    });
    run("gelu", &[x45.clone()], &|g, v| {
        let y = g.gelu(v[0]);
        p(g, y, 9)
    });
    run("tanh", &[x45.clone()], &|g, v| {
        let y = g.tanh(v[0]);
        p(g, y, 10)
    });
    run("abs", &[x45.clone()], &|g, v| {
        let y = g.abs(v[0]);
        p(g, y, 11)
    });
    run("sqrt", &[pos23.clone()], &|g, v| {
        let y = g.sqrt(v[0]);
        p(g, y, 12)
    });
    run("softmax_rows", &[x45.clone()], &|g, v| {
        let y = g.softmax_rows(v[0], None)?;
        p(g, y, 13)
    });
    run("softmax_rows_masked", &[x45.clone()], &|g, v| {
        let y = g.softmax_rows(v[0], Some(&mask_pattern(20, 3)))?;
        p(g, y, 14)
    });
    run("layer_norm", &[x45.clone(), random_tensor(&[5], &mut CtalRng::seed_from_u64(1)), random_tensor(&[5], &mut CtalRng::seed_from_u64(2))], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
        p(g, y, 15)
    });
    run("gather_rows", &[table.clone()], &|g, v| {
        let y = g.gather_rows(v[0], &[0, 2, 2, 4])?;
        p(g, y, 16)
    });
    run("slice_cols", &[x45.clone()], &|g, v| {
        let y = g.slice_cols(v[0], 1, 3)?;
        p(g, y, 17)
    });
    run("concat_cols", &[a23.clone(), random_tensor(&[2, 2], &mut CtalRng::seed_from_u64(3))], &|g, v| {
        let y = g.concat_cols(&[v[0], v[1], v[0]])?;
        p(g, y, 18)
    });
    run("slice_rows", &[x45.clone()], &|g, v| {
        let y = g.slice_rows(v[0], 1, 2)?;
        p(g, y, 19)
    });
    run("concat_rows", &[a23.clone(), b23.clone()], &|g, v| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        p(g, y, 20)
    });
    run("max_pool_rows", &[x45.clone()], &|g, v| {
        let y = g.max_pool_rows(v[0], Some(&[true, false, true, true]))?;
        p(g, y, 21)
    });
    run("sum", &[a23.clone()], &|g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    });
    run("mean", &[a23.clone()], &|g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean(y))
    });
    run("reshape", &[a23.clone()], &|g, v| {
        let y = g.reshape(v[0], &[3, 2])?;
        p(g, y, 22)
    });
    run("dropout", &[x45.clone()], &|g, v| {
        let y = g.dropout(v[0], 0.3, &mut CtalRng::seed_from_u64(23));
        p(g, y, 23)
    });
    run("cross_entropy", &[l35.clone()], &|g, v| g.cross_entropy(v[0], &[Some(1), None, Some(4)], 2.0));
    run("l1_rows", &[l35.clone()], &|g, v| g.l1_rows(v[0], &t35, &[true, false, true], 3.0));
    run("scalar_chain", &[s1.clone(), random_tensor(&[1], &mut CtalRng::seed_from_u64(4))], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        let d = g.abs(v[1]);
        let d = g.scale(d, 1.0);
        let one = g.constant(Tensor::scalar(1.0));
        let d = g.add(d, one)?;
        g.div(y, d)
    });
    out
}

/// Full pre-training loss (MLM + MCAM over a two-pair batch) against central differences.
pub fn pretrain_gradcheck(per_tensor: usize) -> (f64, usize) {
    use ctal::model::{CtalModel, PairBatch};
    use ctal::pretrain::{apply_plans, plan_mcam, plan_mlm, pretrain_losses, ReplacementMode};
    let vocab = 30;
    let cfg = small_config(vocab);
    let model = CtalModel::<f64>::new(cfg.clone(), &mut CtalRng::seed_from_u64(5)).unwrap();
    let ex = [random_pair("a", 8, 45, vocab, 1), random_pair("b", 5, 30, vocab, 2)];
    let pairs: Vec<(&[u32], &AcousticFeatureSequence)> = ex.iter().map(|e| (&e.tokens[..], &e.features)).collect();
    let batch = PairBatch::from_examples(&pairs, cfg.max_text_len, cfg.max_audio_frames).unwrap();
    // seed chosen so both rows get MLM labels
    let mut seed = 0;
    let corrupted = loop {
        let mut rng = CtalRng::seed_from_u64(seed);
        let mlm: Vec<_> = ex.iter().map(|e| plan_mlm(&e.tokens, vocab, &mut rng)).collect();
        let mcam: Vec<_> = ex
            .iter()
            .map(|e| plan_mcam(e.features.num_frames, ReplacementMode::Contiguous, &mut rng))
            .collect();
        if mlm.iter().all(|m| !m.positions.is_empty()) {
            break apply_plans(&batch, &mlm, &mcam).unwrap();
        }
        seed += 1;
    };
    check_store(&model.params, per_tensor, |p, with_grads| {
        let (l, g) = pretrain_losses(&cfg, p, &corrupted, None, with_grads).unwrap();
        (l.total, g)
    })
}

/// Fine-tuning loss (task + orthogonal term) against central differences.
pub fn finetune_gradcheck(head: ctal::finetune::TaskHead, per_tensor: usize) -> (f64, usize) {
    use ctal::finetune::{batch_loss, FinetuneModel, LabeledExample, Target, TaskHead};
    let vocab = 30;
    let cfg = small_config(vocab);
    let model = FinetuneModel::<f64>::new(cfg, head.clone(), &mut CtalRng::seed_from_u64(6)).unwrap();
    let data: Vec<LabeledExample> = (0..2)
        .map(|i| LabeledExample {
            pair: random_pair("x", 6 + i, 25 + 5 * i, vocab, 10 + i as u64),
            target: match head {
                TaskHead::Regression => Target::Score(1.5 - 3.0 * i as f64),
                _ => Target::Class(i),
            },
        })
        .collect();
    let refs: Vec<&LabeledExample> = data.iter().collect();
    check_store(&model.params, per_tensor, |p, with_grads| {
        let m = FinetuneModel {
            config: model.config.clone(),
            head: model.head.clone(),
            params: p.clone(),
        };
        batch_loss(&m, &refs, 1.0, None, with_grads).unwrap()
    })
}

/// Tokenized, feature-extracted pairs for synthetic utterances.
pub fn synth_pairs(utts: &[ctal::synth::SynthUtterance], vocab: &ctal::tokenizer::BbpeVocab) -> Vec<PairExample> {
    let frontend = ctal::audio::FrontendConfig::default();
    utts.iter()
        .map(|u| PairExample {
            id: u.id.clone(),
            tokens: vocab.encode(&u.transcript).ids,
            features: ctal::audio::extract(&u.waveform, &frontend).unwrap(),
            label: Some(u.label.clone()),
        })
        .collect()
}

pub fn class_examples(utts: &[ctal::synth::SynthUtterance], pairs: Vec<PairExample>) -> Vec<ctal::finetune::LabeledExample> {
    pairs
        .into_iter()
        .zip(utts)
        .map(|(pair, u)| ctal::finetune::LabeledExample {
            pair,
            target: ctal::finetune::Target::Class(u.class),
        })
        .collect()
}

/// `(predictions, golds)` of a classifier over labeled examples.
pub fn classify(
    model: &ctal::finetune::FinetuneModel<f32>,
    data: &[ctal::finetune::LabeledExample],
) -> (Vec<usize>, Vec<usize>) {
    let pairs: Vec<PairExample> = data.iter().map(|e| e.pair.clone()).collect();
    let preds = ctal::finetune::infer(model, &pairs)
        .unwrap()
        .iter()
        .map(|r| ctal::metrics::argmax(&r.outputs))
        .collect();
    let golds = data
        .iter()
        .map(|e| match e.target {
            ctal::finetune::Target::Class(c) => c,
            ctal::finetune::Target::Score(_) => panic!("regression target"),
        })
        .collect();
    (preds, golds)
}
