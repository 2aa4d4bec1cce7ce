//! One forward pass through both streams, printing the shape of every layer
//! output and the cross-attention weights of the first audio frame.
//!
//! ```text
//! cargo run --release --example forward
//! ```

use ctal::audio::{extract, FrontendConfig};
use ctal::autograd::Graph;
use ctal::model::{encode, CtalModel, ModelConfig, PairBatch};
use ctal::params::Binder;
use ctal::synth::{generate, SynthConfig, SynthKind};
use ctal::tokenizer::BbpeVocab;
use ctal::CtalRng;
use rand::SeedableRng;

fn main() -> ctal::Result<()> {
    let utt = generate(&SynthConfig::new(SynthKind::Emotion, 1))?.remove(0);
    let vocab = BbpeVocab::bytes_only();
    let tokens = vocab.encode(&utt.transcript).ids;
    let feats = extract(&utt.waveform, &FrontendConfig::default())?;
    let model = CtalModel::<f32>::new(ModelConfig::tiny(vocab.len()), &mut CtalRng::seed_from_u64(0))?;
    println!("{} parameters; \"{}\"", model.params.num_elements(), utt.transcript);

    let batch = PairBatch::from_examples(&[(&tokens[..], &feats)], 64, 256)?;
    let mut g = Graph::new();
    let mut p = Binder::frozen(&model.params);
    let enc = encode(&model.config, &mut g, &mut p, &batch.item(0), None)?;
    for (k, v) in enc.text.layers.iter().enumerate() {
        println!("text  layer {k}: {:?}", g.value(*v).shape());
    }
    for (l, v) in enc.audio.layers.iter().enumerate() {
        println!("audio layer {l}: {:?}", g.value(*v).shape());
    }
    let last = enc.audio.cross_attn.last().unwrap();
    for (h, w) in last.iter().enumerate() {
        let row = g.value(*w).row(0);
        let top = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let piece = String::from_utf8_lossy(vocab.token_bytes(tokens[top]).unwrap_or(b"?")).into_owned();
        println!("head {h}: frame 0 attends most to token {top} ({piece:?}), weight {:.3}", row[top]);
    }
    Ok(())
}
