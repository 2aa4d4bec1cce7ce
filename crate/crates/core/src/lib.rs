//! Cross-modal Transformer for audio and language.
//!
//! The crate covers the whole pipeline on CPU: log-Mel feature extraction,
//! byte-level BPE tokenization, a two-stream Transformer (a text encoder and a
//! text-referred audio encoder), masked language modeling and masked
//! cross-modal acoustic modeling pre-training, pooling fusion with orthogonal
//! regularization for fine-tuning, and the evaluation metrics for emotion
//! classification, sentiment analysis and speaker verification.
//!
//! Everything numeric runs on a small tape-based autodiff engine
//! ([`autograd::Graph`]) generic over `f32`/`f64`.

pub mod audio;
pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// Seedable generator used for every random draw in the crate.
pub type CtalRng = rand_chacha::ChaCha8Rng;
