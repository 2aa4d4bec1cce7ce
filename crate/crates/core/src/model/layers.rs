//! Building blocks shared by both encoding stacks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tensor::Real;
use crate::CtalRng;

pub fn linear<R: Real>(g: &mut Graph<R>, p: &mut Binder<R>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(g, &format!("{prefix}.weight"))?;
    let b = p.get(g, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm<R: Real>(
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let gamma = p.get(g, &format!("{prefix}.gamma"))?;
    let beta = p.get(g, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// Position-wise feed-forward: `GELU(x W1 + b1) W2 + b2`.
pub fn feed_forward<R: Real>(
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    prefix: &str,
    x: Var,
    dropout: f64,
    rng: &mut Option<&mut CtalRng>,
) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.inner"), x)?;
    let h = g.gelu(h);
    let h = maybe_dropout(g, h, dropout, rng);
    linear(g, p, &format!("{prefix}.outer"), h)
}

pub fn maybe_dropout<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut CtalRng>,
) -> Var {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, *r),
        _ => x,
    }
}

/// Output of [`multi_head_attention`]: the projected context and each head's weights.
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` slices of the projected inputs.
///
/// `key_mask[j] == false` hides key `j` from every query. A query row whose
/// keys are all hidden is a [`Error::DegenerateAttention`].
pub fn multi_head_attention<R: Real>(
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    prefix: &str,
    query_in: Var,
    kv_in: Var,
    key_mask: &[bool],
    heads: usize,
) -> Result<Attention> {
    let d = g.value(query_in).dims2().1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let lq = g.value(query_in).dims2().0;
    let lk = g.value(kv_in).dims2().0;
    if key_mask.len() != lk {
        return Err(Error::shape("attention key mask", &[lk], &[key_mask.len()]));
    }
    let dh = d / heads;
    let q = linear(g, p, &format!("{prefix}.query"), query_in)?;
    let k = linear(g, p, &format!("{prefix}.key"), kv_in)?;
    let v = linear(g, p, &format!("{prefix}.value"), kv_in)?;
    let mask: Vec<bool> = (0..lq).flat_map(|_| key_mask.iter().copied()).collect();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores, Some(&mask))?;
        contexts.push(g.matmul(probs, vh)?);
        weights.push(probs);
    }
    let ctx = if heads == 1 {
        contexts[0]
    } else {
        g.concat_cols(&contexts)?
    };
    let output = linear(g, p, &format!("{prefix}.output"), ctx)?;
    Ok(Attention { output, weights })
}

/// `LayerNorm(sublayer + residual)`.
pub fn add_and_norm<R: Real>(
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    prefix: &str,
    sublayer: Var,
    residual: Var,
    eps: f64,
) -> Result<Var> {
    let s = g.add(sublayer, residual)?;
    layer_norm(g, p, prefix, s, eps)
}
