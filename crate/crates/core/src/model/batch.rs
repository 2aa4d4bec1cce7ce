use crate::audio::{AcousticFeatureSequence, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::tokenizer::PAD;

/// Padded batch of (token ids, acoustic features) pairs.
///
/// `tokens[b]` has length `text_len`, padded with `<pad>`; `audio[b]` is
/// `audio_len × 160` row-major, zero padded. Masks mark real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub tokens: Vec<Vec<u32>>,
    pub text_mask: Vec<Vec<bool>>,
    pub audio: Vec<Vec<f32>>,
    pub audio_mask: Vec<Vec<bool>>,
    pub text_len: usize,
    pub audio_len: usize,
}

/// One batch row, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct PairItem<'a> {
    pub tokens: &'a [u32],
    pub text_mask: &'a [bool],
    pub audio: &'a [f32],
    pub audio_mask: &'a [bool],
}

impl PairItem<'_> {
    pub fn audio_frames(&self) -> usize {
        self.audio_mask.len()
    }

    pub fn real_text_len(&self) -> usize {
        self.text_mask.iter().filter(|&&m| m).count()
    }

    pub fn real_audio_len(&self) -> usize {
        self.audio_mask.iter().filter(|&&m| m).count()
    }
}

impl PairBatch {
    /// Pads to the longest sequence of each modality, truncating at the caps.
    pub fn from_examples(
        examples: &[(&[u32], &AcousticFeatureSequence)],
        max_text_len: usize,
        max_audio_frames: usize,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let clip_text = |n: usize| {
            if n > max_text_len {
                log::warn!("text of {n} tokens truncated to {max_text_len}");
            }
            n.min(max_text_len)
        };
        let clip_audio = |n: usize| {
            if n > max_audio_frames {
                log::warn!("audio of {n} frames truncated to {max_audio_frames}");
            }
            n.min(max_audio_frames)
        };
        let text_len = examples.iter().map(|(t, _)| clip_text(t.len())).max().unwrap();
        let audio_len = examples
            .iter()
            .map(|(_, a)| clip_audio(a.num_frames))
            .max()
            .unwrap();
        let mut batch = Self {
            tokens: Vec::new(),
            text_mask: Vec::new(),
            audio: Vec::new(),
            audio_mask: Vec::new(),
            text_len,
            audio_len,
        };
        for (ids, feats) in examples {
            let n = ids.len().min(max_text_len);
            let mut t = ids[..n].to_vec();
            t.resize(text_len, PAD);
            batch.tokens.push(t);
            batch
                .text_mask
                .push((0..text_len).map(|i| i < n).collect());
            let frames = feats.num_frames.min(max_audio_frames);
            let mut a = feats.frames[..frames * FEATURE_DIM].to_vec();
            a.resize(audio_len * FEATURE_DIM, 0.0);
            batch.audio.push(a);
            batch
                .audio_mask
                .push((0..audio_len).map(|i| i < frames).collect());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn item(&self, b: usize) -> PairItem<'_> {
        PairItem {
            tokens: &self.tokens[b],
            text_mask: &self.text_mask[b],
            audio: &self.audio[b],
            audio_mask: &self.audio_mask[b],
        }
    }

    /// Unpadded features of item `b`.
    pub fn real_audio(&self, b: usize) -> &[f32] {
        let n = self.audio_mask[b].iter().filter(|&&m| m).count();
        &self.audio[b][..n * FEATURE_DIM]
    }
}
