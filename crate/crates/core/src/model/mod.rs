//! The two-stream network: input embeddings, the text encoding module and the
//! text-referred audio encoding module, plus the two pre-training heads.
//!
//! Both stacks use post-norm residual wiring. Text layer `k`:
//!
//! ```text
//! Ĥ = MultiHead(H, H, H);  H̃ = LayerNorm(Ĥ + H);  H' = LayerNorm(FFN(H̃) + H̃)
//! ```
//!
//! Audio layer `l` runs bidirectional self-attention (no future mask), then
//! cross-attention whose keys and values are always the *final* text output:
//!
//! ```text
//! Ĥ = MultiHead(A, A, A);     Ã = LayerNorm(Ĥ + A)
//! H̄ = MultiHead(Ã, Hw, Hw);   Ä = LayerNorm(H̄ + Ã);   A' = LayerNorm(FFN(Ä) + Ä)
//! ```

mod batch;
pub mod checkpoint;
mod config;
pub mod layers;

use rand::Rng;

pub use batch::{PairBatch, PairItem};
pub use config::ModelConfig;

use crate::audio::FEATURE_DIM;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, Binder, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::CtalRng;
use layers::{add_and_norm, feed_forward, layer_norm, linear, maybe_dropout, multi_head_attention};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

pub type ParamSpec = (String, Vec<usize>, Init);

fn push_linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Normal));
    out.push((format!("{prefix}.bias"), vec![fan_out], Init::Zeros));
}

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gamma"), vec![d], Init::Ones));
    out.push((format!("{prefix}.beta"), vec![d], Init::Zeros));
}

fn push_attention(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for part in ["query", "key", "value", "output"] {
        push_linear(out, &format!("{prefix}.{part}"), d, d);
    }
}

fn push_ffn(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, inner: usize) {
    push_linear(out, &format!("{prefix}.inner"), d, inner);
    push_linear(out, &format!("{prefix}.outer"), inner, d);
}

/// Embeddings and both encoder stacks.
pub fn backbone_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (h, f) = (cfg.hidden, cfg.ffn_dim);
    let mut out = vec![
        ("embeddings.token".into(), vec![cfg.vocab_size, h], Init::Normal),
        ("embeddings.text_position".into(), vec![cfg.max_text_len, h], Init::Normal),
    ];
    push_linear(&mut out, "embeddings.audio_projection", cfg.audio_feature_dim, h);
    out.push(("embeddings.audio_position".into(), vec![cfg.max_audio_frames, h], Init::Normal));
    for k in 0..cfg.layers {
        let p = format!("text_encoder.layers.{k}");
        push_attention(&mut out, &format!("{p}.self_attn"), h);
        push_norm(&mut out, &format!("{p}.attn_norm"), h);
        push_ffn(&mut out, &format!("{p}.ffn"), h, f);
        push_norm(&mut out, &format!("{p}.ffn_norm"), h);
    }
    for l in 0..cfg.layers {
        let p = format!("audio_encoder.layers.{l}");
        push_attention(&mut out, &format!("{p}.self_attn"), h);
        push_norm(&mut out, &format!("{p}.self_attn_norm"), h);
        push_attention(&mut out, &format!("{p}.cross_attn"), h);
        push_norm(&mut out, &format!("{p}.cross_attn_norm"), h);
        push_ffn(&mut out, &format!("{p}.ffn"), h, f);
        push_norm(&mut out, &format!("{p}.ffn_norm"), h);
    }
    out
}

/// MLM and MCAM heads, dropped at fine-tuning.
pub fn pretrain_head_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.hidden;
    let mut out = Vec::new();
    push_linear(&mut out, "mlm_head.transform", h, h);
    push_norm(&mut out, "mlm_head.norm", h);
    if !cfg.tie_mlm_decoder {
        out.push(("mlm_head.decoder.weight".into(), vec![h, cfg.vocab_size], Init::Normal));
    }
    out.push(("mlm_head.decoder.bias".into(), vec![cfg.vocab_size], Init::Zeros));
    push_linear(&mut out, "mcam_head", h, cfg.audio_feature_dim);
    out
}

pub const PRETRAIN_HEAD_PREFIXES: [&str; 2] = ["mlm_head.", "mcam_head."];

pub fn init_params<R: Real>(specs: &[ParamSpec], std: f64, rng: &mut impl Rng) -> ParamStore<R> {
    let mut store = ParamStore::new();
    for (name, shape, init) in specs {
        let t = match init {
            Init::Normal => normal_init(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape.clone()),
            Init::Ones => Tensor::ones(shape.clone()),
        };
        store.insert(name.clone(), t);
    }
    store
}

/// Parameter totals, overall and per top-level sub-module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub per_module: Vec<(String, usize)>,
}

impl ParameterCount {
    pub fn from_specs<'a>(specs: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let mut per_module: Vec<(String, usize)> = Vec::new();
        let mut total = 0;
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            total += n;
            let module = name.split('.').next().unwrap_or(name);
            match per_module.iter_mut().find(|(m, _)| m == module) {
                Some((_, c)) => *c += n,
                None => per_module.push((module.to_string(), n)),
            }
        }
        Self { total, per_module }
    }

    pub fn module(&self, name: &str) -> usize {
        self.per_module
            .iter()
            .find(|(m, _)| m == name)
            .map_or(0, |(_, c)| *c)
    }
}

/// Exact parameter count of the pre-training model (backbone plus both heads).
pub fn count_parameters(cfg: &ModelConfig) -> ParameterCount {
    let specs: Vec<ParamSpec> = backbone_specs(cfg)
        .into_iter()
        .chain(pretrain_head_specs(cfg))
        .collect();
    ParameterCount::from_specs(specs.iter().map(|(n, s, _)| (n.as_str(), s.as_slice())))
}

/// Outputs of the text stream.
pub struct TextEncoding {
    /// `H_w^k` for `k = 0..=N`; `layers[0]` is the embedding.
    pub layers: Vec<Var>,
    pub self_attn: Vec<Vec<Var>>,
}

impl TextEncoding {
    pub fn output(&self) -> Var {
        *self.layers.last().unwrap()
    }
}

/// Outputs of the audio stream.
pub struct AudioEncoding {
    /// `H_a^l` for `l = 0..=N`.
    pub layers: Vec<Var>,
    pub self_attn: Vec<Vec<Var>>,
    pub cross_attn: Vec<Vec<Var>>,
    /// The node fed as cross-attention keys/values in each layer.
    pub cross_kv: Vec<Var>,
}

impl AudioEncoding {
    pub fn output(&self) -> Var {
        *self.layers.last().unwrap()
    }
}

pub struct Encoding {
    pub text: TextEncoding,
    pub audio: AudioEncoding,
}

fn clip<'a, T>(xs: &'a [T], cap: usize, what: &str) -> &'a [T] {
    if xs.len() > cap {
        log::warn!("{what}: {} positions truncated to {cap}", xs.len());
        &xs[..cap]
    } else {
        xs
    }
}

/// Token embedding plus learned position embedding, `[T × H]`.
pub fn embed_text<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    tokens: &[u32],
) -> Result<Var> {
    let tokens = clip(tokens, cfg.max_text_len, "text");
    let table = p.get(g, "embeddings.token")?;
    let positions = p.get(g, "embeddings.text_position")?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = g.gather_rows(table, &ids)?;
    let pos_ids: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather_rows(positions, &pos_ids)?;
    g.add(tok, pos)
}

/// Linear projection of the 160-dim frames plus learned position embedding, `[𝒯 × H]`.
pub fn embed_audio<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    features: &[f32],
) -> Result<Var> {
    if features.is_empty() || features.len() % FEATURE_DIM != 0 {
        return Err(Error::shape("embed_audio", &[features.len()], &[FEATURE_DIM]));
    }
    let frames = features.len() / FEATURE_DIM;
    let kept = if frames > cfg.max_audio_frames {
        log::warn!("audio: {frames} frames truncated to {}", cfg.max_audio_frames);
        cfg.max_audio_frames
    } else {
        frames
    };
    let data = features[..kept * FEATURE_DIM]
        .iter()
        .map(|&v| R::from_f64c(v as f64))
        .collect();
    let x = g.constant(Tensor::from_vec(vec![kept, FEATURE_DIM], data)?);
    let proj = linear(g, p, "embeddings.audio_projection", x)?;
    let positions = p.get(g, "embeddings.audio_position")?;
    let pos = g.gather_rows(positions, &(0..kept).collect::<Vec<_>>())?;
    g.add(proj, pos)
}

pub fn text_encoder_forward<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    h0: Var,
    text_mask: &[bool],
    mut rng: Option<&mut CtalRng>,
) -> Result<TextEncoding> {
    let text_mask = clip(text_mask, cfg.max_text_len, "text mask");
    let eps = cfg.layer_norm_eps;
    let mut h = maybe_dropout(g, h0, cfg.dropout, &mut rng);
    let mut out = TextEncoding {
        layers: vec![h],
        self_attn: Vec::new(),
    };
    for k in 0..cfg.layers {
        let pre = format!("text_encoder.layers.{k}");
        let att = multi_head_attention(g, p, &format!("{pre}.self_attn"), h, h, text_mask, cfg.heads)?;
        let a = maybe_dropout(g, att.output, cfg.dropout, &mut rng);
        let h_tilde = add_and_norm(g, p, &format!("{pre}.attn_norm"), a, h, eps)?;
        let f = feed_forward(g, p, &format!("{pre}.ffn"), h_tilde, cfg.dropout, &mut rng)?;
        let f = maybe_dropout(g, f, cfg.dropout, &mut rng);
        h = add_and_norm(g, p, &format!("{pre}.ffn_norm"), f, h_tilde, eps)?;
        out.layers.push(h);
        out.self_attn.push(att.weights);
    }
    Ok(out)
}

pub fn audio_encoder_forward<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    a0: Var,
    text_final: Var,
    audio_mask: &[bool],
    text_mask: &[bool],
    mut rng: Option<&mut CtalRng>,
) -> Result<AudioEncoding> {
    let audio_mask = clip(audio_mask, cfg.max_audio_frames, "audio mask");
    let text_mask = clip(text_mask, cfg.max_text_len, "text mask");
    let eps = cfg.layer_norm_eps;
    let mut a = maybe_dropout(g, a0, cfg.dropout, &mut rng);
    let mut out = AudioEncoding {
        layers: vec![a],
        self_attn: Vec::new(),
        cross_attn: Vec::new(),
        cross_kv: Vec::new(),
    };
    for l in 0..cfg.layers {
        let pre = format!("audio_encoder.layers.{l}");
        // bidirectional: only padding is masked
        let sa = multi_head_attention(g, p, &format!("{pre}.self_attn"), a, a, audio_mask, cfg.heads)?;
        let s = maybe_dropout(g, sa.output, cfg.dropout, &mut rng);
        let a_tilde = add_and_norm(g, p, &format!("{pre}.self_attn_norm"), s, a, eps)?;
        let ca = multi_head_attention(
            g,
            p,
            &format!("{pre}.cross_attn"),
            a_tilde,
            text_final,
            text_mask,
            cfg.heads,
        )?;
        let c = maybe_dropout(g, ca.output, cfg.dropout, &mut rng);
        let a_ddot = add_and_norm(g, p, &format!("{pre}.cross_attn_norm"), c, a_tilde, eps)?;
        let f = feed_forward(g, p, &format!("{pre}.ffn"), a_ddot, cfg.dropout, &mut rng)?;
        let f = maybe_dropout(g, f, cfg.dropout, &mut rng);
        a = add_and_norm(g, p, &format!("{pre}.ffn_norm"), f, a_ddot, eps)?;
        out.layers.push(a);
        out.self_attn.push(sa.weights);
        out.cross_attn.push(ca.weights);
        out.cross_kv.push(text_final);
    }
    Ok(out)
}

/// Text stream only (the MLM path never sees audio).
pub fn encode_text<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    tokens: &[u32],
    text_mask: &[bool],
    rng: Option<&mut CtalRng>,
) -> Result<TextEncoding> {
    let h0 = embed_text(cfg, g, p, tokens)?;
    text_encoder_forward(cfg, g, p, h0, text_mask, rng)
}

/// Both streams for one batch item.
pub fn encode<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    item: &PairItem<'_>,
    mut rng: Option<&mut CtalRng>,
) -> Result<Encoding> {
    let text = encode_text(cfg, g, p, item.tokens, item.text_mask, rng.as_deref_mut())?;
    let a0 = embed_audio(cfg, g, p, item.audio)?;
    let audio = audio_encoder_forward(
        cfg,
        g,
        p,
        a0,
        text.output(),
        item.audio_mask,
        item.text_mask,
        rng,
    )?;
    Ok(Encoding { text, audio })
}

/// Vocabulary logits `[T × V]` from the final text representations.
pub fn mlm_logits<R: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<R>,
    p: &mut Binder<R>,
    text_final: Var,
) -> Result<Var> {
    let h = linear(g, p, "mlm_head.transform", text_final)?;
    let h = g.gelu(h);
    let h = layer_norm(g, p, "mlm_head.norm", h, cfg.layer_norm_eps)?;
    let decoder = if cfg.tie_mlm_decoder {
        let table = p.get(g, "embeddings.token")?;
        g.transpose(table)?
    } else {
        p.get(g, "mlm_head.decoder.weight")?
    };
    let logits = g.matmul(h, decoder)?;
    let bias = p.get(g, "mlm_head.decoder.bias")?;
    g.add_bias(logits, bias)
}

/// Reconstructed acoustic features `[𝒯 × 160]`.
pub fn mcam_prediction<R: Real>(g: &mut Graph<R>, p: &mut Binder<R>, audio_final: Var) -> Result<Var> {
    linear(g, p, "mcam_head", audio_final)
}

/// Pre-training model: backbone plus MLM and MCAM heads.
#[derive(Debug, Clone)]
pub struct CtalModel<R> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
}

impl<R: Real> CtalModel<R> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let specs: Vec<ParamSpec> = backbone_specs(&config)
            .into_iter()
            .chain(pretrain_head_specs(&config))
            .collect();
        let params = init_params(&specs, config.init_std, rng);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<R>) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in backbone_specs(&config)
            .into_iter()
            .chain(pretrain_head_specs(&config))
        {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", t.shape(), &shape));
            }
        }
        Ok(Self { config, params })
    }

    pub fn count_parameters(&self) -> ParameterCount {
        ParameterCount::from_specs(self.params.iter().map(|(n, t)| (n, t.shape())))
    }

    /// `[B × T × H]` input embeddings for a padded batch of token ids.
    pub fn embed_text_batch(&self, tokens: &[Vec<u32>]) -> Result<Tensor<R>> {
        let mut data = Vec::new();
        let t = tokens.first().map_or(0, Vec::len);
        for ids in tokens {
            let mut g = Graph::new();
            let mut p = Binder::frozen(&self.params);
            let v = embed_text(&self.config, &mut g, &mut p, ids)?;
            data.extend_from_slice(g.value(v).data());
        }
        Tensor::from_vec(vec![tokens.len(), t.min(self.config.max_text_len), self.config.hidden], data)
    }

    /// `[B × 𝒯 × H]` input embeddings for the batch's (padded) audio.
    pub fn embed_audio_batch(&self, batch: &PairBatch) -> Result<Tensor<R>> {
        let mut data = Vec::new();
        for audio in &batch.audio {
            let mut g = Graph::new();
            let mut p = Binder::frozen(&self.params);
            let v = embed_audio(&self.config, &mut g, &mut p, audio)?;
            data.extend_from_slice(g.value(v).data());
        }
        let frames = batch.audio_len.min(self.config.max_audio_frames);
        Tensor::from_vec(vec![batch.len(), frames, self.config.hidden], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads: 2,
            hidden: 8,
            ffn_dim: 16,
            vocab_size: 20,
            max_text_len: 12,
            max_audio_frames: 16,
            dropout: 0.0,
            ..ModelConfig::tiny(20)
        }
    }

    fn model(cfg: ModelConfig, seed: u64) -> CtalModel<f64> {
        // larger init so attention is far from uniform
        let cfg = ModelConfig { init_std: 0.5, ..cfg };
        CtalModel::new(cfg, &mut CtalRng::seed_from_u64(seed)).unwrap()
    }

    fn features(frames: usize, seed: u64) -> Vec<f32> {
        let mut rng = CtalRng::seed_from_u64(seed);
        (0..frames * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn embed_text_is_token_plus_position() {
        let m = model(tiny(1), 1);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&m.params);
        let e = embed_text(&m.config, &mut g, &mut p, &[5, 5]).unwrap();
        let e = g.value(e);
        assert_eq!(e.shape(), &[2, 8]);
        let pos = m.params.get("embeddings.text_position").unwrap();
        for c in 0..8 {
            let diff = e.at(1, c) - e.at(0, c);
            assert!((diff - (pos.at(1, c) - pos.at(0, c))).abs() < 1e-12);
        }
        let batch = m.embed_text_batch(&[vec![5, 5]]).unwrap();
        assert_eq!(batch.shape(), &[1, 2, 8]);
    }

    #[test]
    fn zero_tables_give_zero_embeddings() {
        let mut m = model(tiny(1), 2);
        for name in [
            "embeddings.token",
            "embeddings.text_position",
            "embeddings.audio_projection.weight",
            "embeddings.audio_position",
        ] {
            let t = m.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut g = Graph::new();
        let mut p = Binder::frozen(&m.params);
        let e = embed_text(&m.config, &mut g, &mut p, &[3, 4, 5]).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        let a = embed_audio(&m.config, &mut g, &mut p, &features(3, 1)).unwrap();
        assert_eq!(g.value(a).shape(), &[3, 8]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_audio_position_difference() {
        let m = model(tiny(1), 3);
        let mut frames = features(1, 4);
        frames.extend(frames.clone());
        let mut g = Graph::new();
        let mut p = Binder::frozen(&m.params);
        let a = embed_audio(&m.config, &mut g, &mut p, &frames).unwrap();
        let a = g.value(a);
        let pos = m.params.get("embeddings.audio_position").unwrap();
        for c in 0..8 {
            let diff = a.at(1, c) - a.at(0, c);
            assert!((diff - (pos.at(1, c) - pos.at(0, c))).abs() < 1e-9);
        }
    }

    #[test]
    fn overlong_inputs_are_truncated() {
        let m = model(tiny(1), 5);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&m.params);
        let ids: Vec<u32> = (0..20).map(|i| i % 20).collect();
        let e = embed_text(&m.config, &mut g, &mut p, &ids).unwrap();
        assert_eq!(g.value(e).shape(), &[12, 8]);
        let a = embed_audio(&m.config, &mut g, &mut p, &features(20, 2)).unwrap();
        assert_eq!(g.value(a).shape(), &[16, 8]);
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = CtalRng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    fn attention_store(d: usize, seed: u64) -> ParamStore<f64> {
        let mut specs = Vec::new();
        push_attention(&mut specs, "att", d);
        let mut store: ParamStore<f64> = init_params(&specs, 0.7, &mut CtalRng::seed_from_u64(seed));
        for (i, (name, shape, init)) in specs.iter().enumerate() {
            if *init == Init::Zeros {
                store.insert(name.clone(), rand_tensor(1, shape[0], seed + i as u64).reshape(shape.clone()).unwrap());
            }
        }
        store
    }

    fn project(x: &Tensor<f64>, store: &ParamStore<f64>, prefix: &str) -> Vec<Vec<f64>> {
        let w = store.get(&format!("{prefix}.weight")).unwrap();
        let b = store.get(&format!("{prefix}.bias")).unwrap();
        let (n, din) = x.dims2();
        let dout = w.shape()[1];
        (0..n)
            .map(|i| {
                (0..dout)
                    .map(|j| b.data()[j] + (0..din).map(|k| x.at(i, k) * w.at(k, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn two_head_attention_matches_naive_loop() {
        let d = 6;
        let heads = 2;
        let store = attention_store(d, 9);
        let xq = rand_tensor(3, d, 10);
        let xkv = rand_tensor(4, d, 11);
        let mask = [true, false, true, true];
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let q_in = g.constant(xq.clone());
        let kv_in = g.constant(xkv.clone());
        let out = multi_head_attention(&mut g, &mut p, "att", q_in, kv_in, &mask, heads).unwrap();

        let q = project(&xq, &store, "att.query");
        let k = project(&xkv, &store, "att.key");
        let v = project(&xkv, &store, "att.value");
        let dh = d / heads;
        let mut ctx = vec![vec![0.0; d]; 3];
        for h in 0..heads {
            for i in 0..3 {
                let scores: Vec<f64> = (0..4)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores
                    .iter()
                    .zip(&mask)
                    .map(|(s, &m)| if m { (s - mx).exp() } else { 0.0 })
                    .collect();
                let z: f64 = exps.iter().sum();
                for j in 0..4 {
                    let w = exps[j] / z;
                    assert!((g.value(out.weights[h]).at(i, j) - w).abs() < 1e-12);
                    for c in 0..dh {
                        ctx[i][h * dh + c] += w * v[j][h * dh + c];
                    }
                }
            }
        }
        let expected = project(&Tensor::from_rows(&ctx).unwrap(), &store, "att.output");
        for i in 0..3 {
            for c in 0..d {
                assert!((g.value(out.output).at(i, c) - expected[i][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        let store = attention_store(4, 3);
        let x = rand_tensor(1, 4, 4);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let xv = g.constant(x.clone());
        let out = multi_head_attention(&mut g, &mut p, "att", xv, xv, &[true], 1).unwrap();
        assert_eq!(g.value(out.weights[0]).data(), &[1.0]);
        let v = project(&x, &store, "att.value");
        let expected = project(&Tensor::from_rows(&v).unwrap(), &store, "att.output");
        for c in 0..4 {
            assert!((g.value(out.output).at(0, c) - expected[0][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let store = attention_store(4, 5);
        let q = rand_tensor(2, 4, 6);
        let row = rand_tensor(1, 4, 7);
        let kv = Tensor::from_rows(&vec![row.data().to_vec(); 5]).unwrap();
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let (qv, kvv) = (g.constant(q), g.constant(kv));
        let out = multi_head_attention(&mut g, &mut p, "att", qv, kvv, &[true; 5], 2).unwrap();
        for w in &out.weights {
            assert!(g.value(*w).data().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let m = model(tiny(0), 6);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&m.params);
        let h0 = embed_text(&m.config, &mut g, &mut p, &[0, 7, 1]).unwrap();
        let enc = text_encoder_forward(&m.config, &mut g, &mut p, h0, &[true; 3], None).unwrap();
        assert_eq!(g.value(enc.output()), g.value(h0));
    }

    fn run(m: &CtalModel<f64>, tokens: &[u32], tmask: &[bool], frames: usize, amask: &[bool]) -> (Graph<f64>, Encoding) {
        let audio = features(frames, 77);
        let item = PairItem {
            tokens,
            text_mask: tmask,
            audio: &audio,
            audio_mask: amask,
        };
        let mut g = Graph::new();
        let mut p = Binder::frozen(&m.params);
        let enc = encode(&m.config, &mut g, &mut p, &item, None).unwrap();
        (g, enc)
    }

    #[test]
    fn padding_leaves_real_positions_unchanged() {
        use crate::tokenizer::PAD;
        let m = model(tiny(2), 7);
        let tokens = [0u32, 9, 12, 1];
        let (g1, e1) = run(&m, &tokens, &[true; 4], 5, &[true; 5]);
        let padded = [0u32, 9, 12, 1, PAD, PAD, PAD];
        let tmask = [true, true, true, true, false, false, false];
        let (g2, e2) = run(&m, &padded, &tmask, 5, &[true; 5]);
        for (a, b) in e1.text.layers.iter().zip(&e2.text.layers) {
            for r in 0..4 {
                for (x, y) in g1.value(*a).row(r).iter().zip(g2.value(*b).row(r)) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
        for (a, b) in e1.audio.layers.iter().zip(&e2.audio.layers) {
            assert!(g1.value(*a).max_abs_diff(g2.value(*b)) < 1e-9);
        }
        for heads in &e2.audio.cross_attn {
            for w in heads {
                let w = g2.value(*w);
                for r in 0..5 {
                    assert!(w.row(r)[4..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn audio_self_attention_is_bidirectional() {
        let m = model(tiny(1), 8);
        let (g, e) = run(&m, &[0, 5, 1], &[true; 3], 6, &[true; 6]);
        let w = g.value(e.audio.self_attn[0][0]);
        let (mut above, mut below) = (0.0, 0.0);
        for i in 0..6 {
            for j in 0..6 {
                if j > i {
                    above += w.at(i, j);
                } else if j < i {
                    below += w.at(i, j);
                }
            }
        }
        assert!(above > 0.0 && below > 0.0);
    }

    #[test]
    fn every_audio_layer_reads_the_final_text_output() {
        let m = model(tiny(3), 9);
        let (_, e) = run(&m, &[0, 5, 1], &[true; 3], 4, &[true; 4]);
        assert_eq!(e.audio.cross_kv.len(), 3);
        assert!(e.audio.cross_kv.iter().all(|v| *v == e.text.output()));
    }

    #[test]
    fn fully_masked_text_is_degenerate() {
        let m = model(tiny(1), 10);
        let audio = features(3, 1);
        let item = PairItem {
            tokens: &[0, 1],
            text_mask: &[false, false],
            audio: &audio,
            audio_mask: &[true; 3],
        };
        let mut g = Graph::new();
        let mut p = Binder::frozen(&m.params);
        let err = encode(&m.config, &mut g, &mut p, &item, None);
        assert!(matches!(err, Err(Error::DegenerateAttention { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model(tiny(2), 11);
        let (g1, e1) = run(&m, &[0, 5, 6, 1], &[true; 4], 7, &[true; 7]);
        let (g2, e2) = run(&m, &[0, 5, 6, 1], &[true; 4], 7, &[true; 7]);
        assert_eq!(g1.value(e1.audio.output()), g2.value(e2.audio.output()));
    }

    #[test]
    fn pathological_config_count_is_closed_form() {
        let cfg = ModelConfig {
            layers: 0,
            vocab_size: 0,
            ..tiny(0)
        };
        let (h, t, a) = (8, 12, 16);
        let expected = t * h + (160 * h + h) + a * h + (h * h + h) + 2 * h + 160 * h + 160;
        let count = count_parameters(&cfg);
        assert_eq!(count.total, expected);
        assert_eq!(count.per_module.iter().map(|(_, c)| c).sum::<usize>(), expected);
        assert_eq!(count.module("text_encoder"), 0);
    }

    #[test]
    fn store_count_matches_spec_count() {
        let m = model(tiny(2), 12);
        assert_eq!(m.count_parameters(), count_parameters(&m.config));
        assert_eq!(m.params.num_elements(), count_parameters(&m.config).total);
    }

    #[test]
    fn presets_are_near_reported_sizes() {
        let base = count_parameters(&ModelConfig::base()).total as f64;
        let large = count_parameters(&ModelConfig::large()).total as f64;
        assert!((base / 60e6 - 1.0).abs() <= 0.2, "base {base}");
        assert!((large / 110e6 - 1.0).abs() <= 0.2, "large {large}");
    }
}
