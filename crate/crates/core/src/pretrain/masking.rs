//! Dynamic mask planning for both pre-training objectives.
//!
//! Plans are drawn fresh on every visit to an utterance. A plan records what
//! to corrupt; [`apply_plans`] performs the corruption and returns labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::model::PairBatch;
use crate::tokenizer::{is_special, MASK, NUM_SPECIALS};

pub const MLM_SELECT_PROB: f64 = 0.15;
pub const MCAM_SELECT_FRACTION: f64 = 0.15;
pub const MIN_SEGMENT: usize = 20;
pub const MAX_SEGMENT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlmAction {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MlmPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MlmAction>,
    /// Original ids at `positions`.
    pub labels: Vec<u32>,
}

impl MlmPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Splits a draw in `[0, 1)` into 80% / 10% / 10%.
fn action_bucket(u: f64) -> u8 {
    if u < 0.8 {
        0
    } else if u < 0.9 {
        1
    } else {
        2
    }
}

/// Selects each non-special token with probability 0.15; a selected token is
/// replaced by `<mask>` 80%, a random non-special id 10%, or kept 10%.
pub fn plan_mlm(tokens: &[u32], vocab_size: usize, rng: &mut impl Rng) -> MlmPlan {
    let mut plan = MlmPlan::default();
    let random_ok = vocab_size > NUM_SPECIALS as usize;
    for (i, &t) in tokens.iter().enumerate() {
        if is_special(t) || rng.random::<f64>() >= MLM_SELECT_PROB {
            continue;
        }
        let action = match action_bucket(rng.random()) {
            0 => MlmAction::Mask,
            1 if random_ok => MlmAction::Random(rng.random_range(NUM_SPECIALS..vocab_size as u32)),
            1 => MlmAction::Mask,
            _ => MlmAction::Keep,
        };
        plan.positions.push(i);
        plan.actions.push(action);
        plan.labels.push(t);
    }
    plan
}

/// How the 10% replacement frames are sourced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementMode {
    /// One contiguous span of the same length, uniform start.
    #[default]
    Contiguous,
    /// Each frame drawn independently from the utterance.
    Independent,
}

impl std::str::FromStr for ReplacementMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiguous" => Ok(Self::Contiguous),
            "independent" => Ok(Self::Independent),
            _ => Err(Error::Config(format!(
                "replacement mode must be contiguous or independent, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum McamAction {
    Zero,
    /// Source frame index for each frame of the segment.
    Replace(Vec<usize>),
    Keep,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct McamPlan {
    pub segments: Vec<Segment>,
    /// Indices into `segments`, ascending.
    pub selected: Vec<usize>,
    pub actions: Vec<McamAction>,
    /// Sorted frame indices reconstructed by the loss.
    pub masked_frames: Vec<usize>,
}

impl McamPlan {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Greedy left-to-right split with `C_num ~ Uniform{20..=50}` per segment;
/// a short tail forms its own segment.
pub fn segment_frames(num_frames: usize, rng: &mut impl Rng) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < num_frames {
        let c = rng.random_range(MIN_SEGMENT..=MAX_SEGMENT);
        let len = c.min(num_frames - start);
        out.push(Segment { start, len });
        start += len;
    }
    out
}

/// Segments, then picks `round(0.15 · count)` of them (at least one).
pub fn plan_mcam(num_frames: usize, mode: ReplacementMode, rng: &mut impl Rng) -> McamPlan {
    let segments = segment_frames(num_frames, rng);
    if segments.is_empty() {
        return McamPlan::default();
    }
    let want = ((segments.len() as f64 * MCAM_SELECT_FRACTION).round() as usize).max(1);
    let mut selected = rand::seq::index::sample(rng, segments.len(), want).into_vec();
    selected.sort_unstable();
    let mut actions = Vec::with_capacity(want);
    let mut masked_frames = Vec::new();
    for &s in &selected {
        let seg = segments[s];
        let action = match action_bucket(rng.random()) {
            0 => McamAction::Zero,
            1 => McamAction::Replace(match mode {
                ReplacementMode::Contiguous => {
                    let from = rng.random_range(0..=num_frames - seg.len);
                    (from..from + seg.len).collect()
                }
                ReplacementMode::Independent => {
                    (0..seg.len).map(|_| rng.random_range(0..num_frames)).collect()
                }
            }),
            _ => McamAction::Keep,
        };
        actions.push(action);
        masked_frames.extend(seg.start..seg.start + seg.len);
    }
    McamPlan {
        segments,
        selected,
        actions,
        masked_frames,
    }
}

/// A corrupted batch with its reconstruction targets.
#[derive(Debug, Clone)]
pub struct CorruptedBatch {
    pub batch: PairBatch,
    /// Original id at each MLM-selected position, `None` elsewhere.
    pub mlm_labels: Vec<Vec<Option<usize>>>,
    /// Frames in `𝒯_mask`.
    pub mcam_mask: Vec<Vec<bool>>,
    /// Uncorrupted features, padded like `batch.audio`.
    pub original_audio: Vec<Vec<f32>>,
}

impl CorruptedBatch {
    pub fn mlm_count(&self) -> usize {
        self.mlm_labels.iter().flatten().filter(|l| l.is_some()).count()
    }

    pub fn mcam_frame_count(&self) -> usize {
        self.mcam_mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Applies one MLM and one MCAM plan per batch row.
pub fn apply_plans(
    batch: &PairBatch,
    mlm_plans: &[MlmPlan],
    mcam_plans: &[McamPlan],
) -> Result<CorruptedBatch> {
    let b = batch.len();
    if mlm_plans.len() != b || mcam_plans.len() != b {
        return Err(Error::shape("apply_plans", &[b], &[mlm_plans.len(), mcam_plans.len()]));
    }
    let mut out = CorruptedBatch {
        batch: batch.clone(),
        mlm_labels: vec![vec![None; batch.text_len]; b],
        mcam_mask: vec![vec![false; batch.audio_len]; b],
        original_audio: batch.audio.clone(),
    };
    for i in 0..b {
        let real_text = batch.text_mask[i].iter().filter(|&&m| m).count();
        let plan = &mlm_plans[i];
        for ((&pos, action), &label) in plan.positions.iter().zip(&plan.actions).zip(&plan.labels) {
            if pos >= real_text {
                return Err(Error::shape("mlm plan position", &[pos], &[real_text]));
            }
            out.batch.tokens[i][pos] = match *action {
                MlmAction::Mask => MASK,
                MlmAction::Random(t) => t,
                MlmAction::Keep => label,
            };
            out.mlm_labels[i][pos] = Some(label as usize);
        }
        let real_audio = batch.audio_mask[i].iter().filter(|&&m| m).count();
        let plan = &mcam_plans[i];
        let src = &batch.audio[i];
        let dst = &mut out.batch.audio[i];
        for (&s, action) in plan.selected.iter().zip(&plan.actions) {
            let seg = plan.segments[s];
            if seg.start + seg.len > real_audio {
                return Err(Error::shape("mcam plan segment", &[seg.start + seg.len], &[real_audio]));
            }
            for (k, t) in (seg.start..seg.start + seg.len).enumerate() {
                let row = &mut dst[t * FEATURE_DIM..(t + 1) * FEATURE_DIM];
                match action {
                    McamAction::Zero => row.fill(0.0),
                    McamAction::Replace(from) => {
                        let f = from[k];
                        if f >= real_audio {
                            return Err(Error::shape("mcam replacement", &[f], &[real_audio]));
                        }
                        row.copy_from_slice(&src[f * FEATURE_DIM..(f + 1) * FEATURE_DIM]);
                    }
                    McamAction::Keep => {}
                }
                out.mcam_mask[i][t] = true;
            }
        }
    }
    Ok(out)
}
