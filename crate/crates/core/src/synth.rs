//! Synthetic paired corpora with known labels.
//!
//! A "speaker" is a harmonic tone with its own pitch and spectral envelope.
//! A label (emotion class or sentiment score) shifts the pitch and sets an
//! amplitude modulation rate, and picks the keyword in a templated
//! transcript. Every downstream task therefore has a signal in both
//! modalities.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const EMOTIONS: [&str; 4] = ["neutral", "happy", "sad", "angry"];

pub const EMOTION_TEMPLATES: [&str; 4] = [
    "the weather is {} and quiet today",
    "we are {} about the party tonight",
    "she was {} after the long goodbye",
    "he is {} about the broken window",
];

pub const EMOTION_KEYWORDS: [[&str; 4]; 4] = [
    ["fine", "okay", "calm", "steady"],
    ["glad", "joyful", "cheerful", "delighted"],
    ["gloomy", "tearful", "unhappy", "down"],
    ["furious", "annoyed", "mad", "irate"],
];

const SENTIMENT_WORDS: [&str; 7] = [
    "horrible", "bad", "dull", "average", "decent", "good", "brilliant",
];

const NEUTRAL_SENTENCES: [&str; 8] = [
    "please call me back after lunch",
    "the train leaves at seven",
    "i put the keys on the table",
    "turn left at the next corner",
    "the meeting moved to thursday",
    "bring two chairs to the kitchen",
    "the report is on the shared drive",
    "water the plants on friday",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Emotion,
    Sentiment,
    Speaker,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emotion" => Ok(Self::Emotion),
            "sentiment" => Ok(Self::Sentiment),
            "speaker" => Ok(Self::Speaker),
            _ => Err(Error::Config(format!(
                "synthetic kind must be emotion, sentiment or speaker, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n: usize,
    pub speakers: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Keyword variants per emotion class (1..=4); 1 makes transcripts a function of the class.
    pub synonyms: usize,
    /// Standard deviation of additive white noise.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(kind: SynthKind, n: usize) -> Self {
        Self {
            kind,
            n,
            speakers: 4,
            seconds: 0.6,
            sample_rate: 16_000,
            seed: 0,
            synonyms: 1,
            noise: 0.0,
        }
    }
}

/// Timbre of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0: f64,
    /// Period (Hz) of the cosine ripple on the harmonic amplitudes.
    pub ripple: f64,
    pub ripple_phase: f64,
}

pub fn voice(speaker: usize) -> Voice {
    let s = speaker as f64;
    Voice {
        f0: 95.0 + (speaker * 37 % 160) as f64,
        ripple: 650.0 + (speaker * 283 % 900) as f64,
        ripple_phase: (s * 2.399_963) % (2.0 * PI),
    }
}

/// Label-dependent prosody.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub pitch: f64,
    /// Amplitude-modulation rate (Hz) and depth in [0, 1).
    pub am_rate: f64,
    pub am_depth: f64,
}

pub fn emotion_style(class: usize) -> Style {
    const STYLES: [(f64, f64, f64); 4] = [
        (1.0, 1.5, 0.15),
        (1.3, 6.0, 0.6),
        (0.8, 2.5, 0.35),
        (1.15, 10.0, 0.8),
    ];
    let (pitch, am_rate, am_depth) = STYLES[class % 4];
    Style {
        pitch,
        am_rate,
        am_depth,
    }
}

/// Sentiment score in [-3, 3] mapped continuously onto prosody.
pub fn sentiment_style(score: f64) -> Style {
    Style {
        pitch: 1.0 + 0.07 * score,
        am_rate: 5.0 + score * 1.3,
        am_depth: 0.4 + 0.1 * score,
    }
}

/// Harmonic tone up to 7.5 kHz with amplitude modulation and optional noise.
pub fn render(
    voice: Voice,
    style: Style,
    seconds: f64,
    sample_rate: u32,
    rng: &mut impl Rng,
    noise: f64,
) -> Result<Waveform> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let f0 = voice.f0 * style.pitch;
    let top = (0.47 * sr).min(7500.0);
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64 * f0)
        .take_while(|&f| f < top)
        .map(|f| {
            let amp = (1.0 + 0.8 * (2.0 * PI * f / voice.ripple + voice.ripple_phase).cos())
                / (f / f0).sqrt();
            (f, amp, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = harmonics
                .iter()
                .map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum();
            let env = 1.0 + style.am_depth * (2.0 * PI * style.am_rate * t).sin();
            tone * env
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for s in &mut samples {
        *s *= 0.5 / peak;
        if noise > 0.0 {
            let u: f64 = rng.random_range(-1.0..1.0);
            *s += noise * u * 3f64.sqrt();
        }
    }
    Waveform::new(samples.iter().map(|&v| v as f32).collect(), sample_rate)
}

/// One generated utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: usize,
    pub transcript: String,
    /// Manifest label: class name, score, or speaker id.
    pub label: String,
    /// Class index (emotion), rounded score bucket + 3 (sentiment), or speaker.
    pub class: usize,
    pub score: f64,
    pub waveform: Waveform,
}

pub fn emotion_transcript(class: usize, keyword: usize) -> String {
    EMOTION_TEMPLATES[class].replace("{}", EMOTION_KEYWORDS[class][keyword % 4])
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    if cfg.speakers == 0 || !(1..=4).contains(&cfg.synonyms) || cfg.seconds <= 0.0 {
        return Err(Error::Config(
            "synth needs speakers >= 1, synonyms in 1..=4 and positive seconds".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = rng_for(&[cfg.seed, i as u64, 0x5157]);
        let speaker = rng.random_range(0..cfg.speakers);
        let (transcript, label, class, score, style) = match cfg.kind {
            SynthKind::Emotion => {
                let c = i % 4;
                let k = rng.random_range(0..cfg.synonyms);
                (emotion_transcript(c, k), EMOTIONS[c].to_string(), c, 0.0, emotion_style(c))
            }
            SynthKind::Sentiment => {
                let score: f64 = rng.random_range(-3.0..=3.0);
                let score = (score * 1000.0).round() / 1000.0;
                let bucket = (score.round() + 3.0) as usize;
                let text = format!("the movie was {} overall", SENTIMENT_WORDS[bucket]);
                (text, format!("{score}"), bucket, score, sentiment_style(score))
            }
            SynthKind::Speaker => {
                let text = NEUTRAL_SENTENCES[rng.random_range(0..NEUTRAL_SENTENCES.len())].to_string();
                let style = emotion_style(rng.random_range(0..4));
                (text, format!("spk{speaker}"), speaker, 0.0, style)
            }
        };
        let waveform = render(voice(speaker), style, cfg.seconds, cfg.sample_rate, &mut rng, cfg.noise)?;
        out.push(SynthUtterance {
            id: format!("utt{i:05}"),
            speaker,
            transcript,
            label,
            class,
            score,
            waveform,
        });
    }
    Ok(out)
}

/// Three splits for measuring what pre-training contributes.
///
/// Labels live only in the keyword; audio prosody is drawn independently of
/// the class. Unlabeled pairs use every keyword inside its class template.
/// Labeled pairs put the keyword in a class-neutral carrier sentence: the
/// train split uses keywords 0 and 1 of each class, the test split uses the
/// unseen keywords 2 and 3. Only a model that learned from the unlabeled
/// pairs which keywords share contexts can label the test split.
#[derive(Debug, Clone)]
pub struct KeywordTransferCorpus {
    pub unlabeled: Vec<SynthUtterance>,
    pub train: Vec<SynthUtterance>,
    pub test: Vec<SynthUtterance>,
}

pub const CARRIER: &str = "i feel so {} now";

pub fn keyword_transfer_corpus(seed: u64, speakers: usize, seconds: f64) -> Result<KeywordTransferCorpus> {
    let make = |split: u64, i: usize, class: usize, kw: usize, templated: bool| {
        let mut rng = rng_for(&[seed, split, i as u64]);
        let speaker = rng.random_range(0..speakers);
        let style = emotion_style(rng.random_range(0..4));
        let waveform = render(voice(speaker), style, seconds, 16_000, &mut rng, 0.0)?;
        let word = EMOTION_KEYWORDS[class][kw];
        let template = if templated { EMOTION_TEMPLATES[class] } else { CARRIER };
        Ok::<_, Error>(SynthUtterance {
            id: format!("s{split}u{i:04}"),
            speaker,
            transcript: template.replace("{}", word),
            label: EMOTIONS[class].to_string(),
            class,
            score: 0.0,
            waveform,
        })
    };
    let mut unlabeled = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rep in 0..speakers {
        for class in 0..4 {
            for kw in 0..4 {
                let i = unlabeled.len();
                unlabeled.push(make(0, i, class, kw, true)?);
                let i = rep * 16 + class * 4 + kw;
                if kw < 2 {
                    train.push(make(1, i, class, kw, false)?);
                } else {
                    test.push(make(2, i, class, kw, false)?);
                }
            }
        }
    }
    Ok(KeywordTransferCorpus {
        unlabeled,
        train,
        test,
    })
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    /// `audio<TAB>transcript` for pre-training.
    pub manifest: PathBuf,
    /// `audio<TAB>transcript<TAB>label`.
    pub labeled: PathBuf,
}

/// Writes `wav/<id>.wav` plus both manifests under `dir`.
pub fn write_corpus(utts: &[SynthUtterance], dir: &Path) -> Result<CorpusFiles> {
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut manifest = String::new();
    let mut labeled = String::new();
    for u in utts {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(&dir.join(&rel), &u.waveform)?;
        manifest.push_str(&format!("{rel}\t{}\n", u.transcript));
        labeled.push_str(&format!("{rel}\t{}\t{}\n", u.transcript, u.label));
    }
    let files = CorpusFiles {
        manifest: dir.join("manifest.tsv"),
        labeled: dir.join("labeled.tsv"),
    };
    std::fs::write(&files.manifest, manifest).map_err(|e| Error::io(&files.manifest, e))?;
    std::fs::write(&files.labeled, labeled).map_err(|e| Error::io(&files.labeled, e))?;
    Ok(files)
}
