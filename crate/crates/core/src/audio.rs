//! Waveform to frame-level acoustic features: 80 log-Mel energies plus their
//! first-order deltas (160 columns per frame), and the on-disk feature cache.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const N_MELS: usize = 80;
pub const FEATURE_DIM: usize = 2 * N_MELS;

const CACHE_MAGIC: &[u8; 8] = b"CTALFEAT";
const CACHE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform has no samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Nearest-sample resampling to `rate`.
    pub fn resample_nearest(&self, rate: u32) -> Waveform {
        if rate == self.sample_rate {
            return self.clone();
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| self.samples[((i as f64 * ratio).round() as usize).min(last)])
            .collect();
        Waveform {
            samples,
            sample_rate: rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_width_ms: f64,
    pub frame_step_ms: f64,
    pub n_mels: usize,
    pub delta_window: usize,
    pub log_floor: f64,
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_width_ms: 50.0,
            frame_step_ms: 12.5,
            n_mels: N_MELS,
            delta_window: 2,
            log_floor: 1e-10,
            normalize: true,
        }
    }
}

impl FrontendConfig {
    pub fn width_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_width_ms / 1000.0).round() as usize
    }

    pub fn step_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_step_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.width_samples().next_power_of_two()
    }

    /// Number of frames produced for `len` samples, or `None` if `len` is shorter than one frame.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let w = self.width_samples();
        (len >= w).then(|| (len - w) / self.step_samples() + 1)
    }
}

/// Frame-level features; `frames` is row-major `num_frames × 160`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatureSequence {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub frame_width_ms: f64,
    pub frame_step_ms: f64,
    pub source: Option<String>,
}

impl AcousticFeatureSequence {
    pub fn new(frames: Vec<f32>, num_frames: usize) -> Result<Self> {
        if num_frames == 0 || frames.len() != num_frames * FEATURE_DIM {
            return Err(Error::InvalidArgument(format!(
                "feature sequence needs num_frames >= 1 and {FEATURE_DIM} columns, got {} values for {num_frames} frames",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            num_frames,
            frame_width_ms: 50.0,
            frame_step_ms: 12.5,
            source: None,
        })
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }
}

/// Splits the waveform into overlapping frames without padding.
pub fn frame_signal(w: &Waveform, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    let width = cfg.width_samples();
    let step = cfg.step_samples();
    let Some(count) = cfg.num_frames(w.samples.len()) else {
        return Err(Error::TooShort {
            min_ms: cfg.frame_width_ms,
            min_samples: width,
            got: w.samples.len(),
        });
    };
    Ok((0..count)
        .map(|i| {
            w.samples[i * step..i * step + width]
                .iter()
                .map(|&s| s as f64)
                .collect()
        })
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each triangular filter.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters over the one-sided spectrum, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-compressed Mel energies for each frame; returns row-major `frames × n_mels`.
pub fn mel_features(frames: &[Vec<f64>], cfg: &FrontendConfig) -> Vec<f64> {
    let width = frames.first().map_or(cfg.width_samples(), Vec::len);
    let n_fft = width.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let window: Vec<f64> = (0..width)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / width as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate);
    let mut out = Vec::with_capacity(frames.len() * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for frame in frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            b.re = s * w;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for filter in &bank {
            let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(cfg.log_floor).ln());
        }
    }
    out
}

/// Appends regression deltas over a `±window` neighbourhood (edges replicated).
pub fn append_deltas(mel: &[f64], num_frames: usize, n_mels: usize, window: usize) -> Vec<f64> {
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let at = |t: isize, j: usize| {
        let t = t.clamp(0, num_frames as isize - 1) as usize;
        mel[t * n_mels + j]
    };
    let mut out = Vec::with_capacity(num_frames * 2 * n_mels);
    for t in 0..num_frames {
        out.extend_from_slice(&mel[t * n_mels..(t + 1) * n_mels]);
        for j in 0..n_mels {
            let mut acc = 0.0;
            for n in 1..=window as isize {
                acc += n as f64 * (at(t as isize + n, j) - at(t as isize - n, j));
            }
            out.push(if denom > 0.0 { acc / denom } else { 0.0 });
        }
    }
    out
}

/// Per-column mean/variance normalization over time; near-constant columns become zero.
pub fn normalize_columns(x: &mut [f64], rows: usize, cols: usize) {
    for j in 0..cols {
        let mean = (0..rows).map(|t| x[t * cols + j]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|t| (x[t * cols + j] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let std = var.sqrt();
        for t in 0..rows {
            let v = &mut x[t * cols + j];
            *v = if std > 1e-5 { (*v - mean) / std } else { 0.0 };
        }
    }
}

/// Full front end: resample, frame, log-Mel, deltas, per-utterance normalization.
pub fn extract(w: &Waveform, cfg: &FrontendConfig) -> Result<AcousticFeatureSequence> {
    let w = w.resample_nearest(cfg.sample_rate);
    let frames = frame_signal(&w, cfg)?;
    let num_frames = frames.len();
    let mel = mel_features(&frames, cfg);
    let mut feats = append_deltas(&mel, num_frames, cfg.n_mels, cfg.delta_window);
    let cols = 2 * cfg.n_mels;
    if cfg.normalize {
        normalize_columns(&mut feats, num_frames, cols);
    }
    if feats.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("acoustic features".into()));
    }
    let mut seq = AcousticFeatureSequence::new(feats.iter().map(|&v| v as f32).collect(), num_frames)?;
    seq.frame_width_ms = cfg.frame_width_ms;
    seq.frame_step_ms = cfg.frame_step_ms;
    Ok(seq)
}

/// Reads a 16-bit PCM mono WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM mono, got {} channel(s) at {} bits",
                spec.channels, spec.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn encode_feature_cache(seq: &AcousticFeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + seq.frames.len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.num_frames as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for v in &seq.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_cache(bytes: &[u8], path: &Path) -> Result<AcousticFeatureSequence> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 18 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a feature cache (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let frames = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    if dim != FEATURE_DIM {
        return Err(bad(&format!("feature dim {dim}, expected {FEATURE_DIM}")));
    }
    let payload = &bytes[18..];
    if payload.len() != frames * dim * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut seq = AcousticFeatureSequence::new(data, frames).map_err(|e| bad(&e.to_string()))?;
    seq.source = Some(path.display().to_string());
    Ok(seq)
}

pub fn write_feature_cache(path: &Path, seq: &AcousticFeatureSequence) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_feature_cache(seq))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<AcousticFeatureSequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes, path)
}
