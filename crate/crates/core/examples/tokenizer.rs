//! Trains a byte-level BPE vocabulary on a few sentences and shows how text
//! splits into tokens.
//!
//! ```text
//! cargo run --release --example tokenizer -- "some text to encode"
//! ```

use ctal::synth::{generate, SynthConfig, SynthKind};
use ctal::tokenizer::train_bbpe;

fn main() -> ctal::Result<()> {
    let mut cfg = SynthConfig::new(SynthKind::Emotion, 64);
    cfg.synonyms = 4;
    let utts = generate(&cfg)?;
    let vocab = train_bbpe(utts.iter().map(|u| u.transcript.as_str()), 360)?;
    println!("{} tokens, {} merges", vocab.len(), vocab.merges().len());

    let text = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "i am so happy today, really glad! ünïcödé".into());
    let seq = vocab.encode(&text);
    let pieces: Vec<String> = seq
        .ids
        .iter()
        .map(|&id| String::from_utf8_lossy(vocab.token_bytes(id).unwrap_or(b"?")).into_owned())
        .collect();
    println!("{text:?}\n  ids    {:?}\n  pieces {pieces:?}", seq.ids);
    let back = vocab.decode(&seq.ids)?;
    println!("  decoded back exactly: {}", back == text);
    Ok(())
}
