//! Renders a synthetic utterance, extracts mel + delta features and prints a
//! coarse spectrogram of the first mel bands.
//!
//! ```text
//! cargo run --release --example features
//! ```

use ctal::audio::{extract, FrontendConfig, N_MELS};
use ctal::synth::{generate, SynthConfig, SynthKind};

fn main() -> ctal::Result<()> {
    let mut cfg = SynthConfig::new(SynthKind::Emotion, 4);
    cfg.seconds = 1.0;
    let frontend = FrontendConfig::default();
    for u in generate(&cfg)? {
        let f = extract(&u.waveform, &frontend)?;
        println!(
            "{} ({}, \"{}\"): {} samples -> {} frames x {} dims",
            u.id,
            u.label,
            u.transcript,
            u.waveform.samples.len(),
            f.num_frames,
            f.dim()
        );
        // every 8th frame, mel bands 0..40 in steps of 4, as a shade ramp
        let shades = [' ', '.', ':', '-', '=', '+', '*', '#'];
        for band in (0..40).step_by(4).rev() {
            let line: String = (0..f.num_frames)
                .step_by(8)
                .map(|t| {
                    let v = f.frame(t)[band].clamp(-2.0, 2.0);
                    shades[((v + 2.0) / 4.0 * 7.0).round() as usize]
                })
                .collect();
            println!("  mel {band:2} |{line}|");
        }
        let delta_energy: f32 = (0..f.num_frames).map(|t| f.frame(t)[N_MELS..].iter().map(|d| d.abs()).sum::<f32>()).sum();
        println!("  mean |delta| per frame {:.2}", delta_energy / f.num_frames as f32);
    }
    Ok(())
}
