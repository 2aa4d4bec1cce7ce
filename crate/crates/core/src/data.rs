//! Manifests and in-memory corpora of (transcript, audio) pairs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::{self, AcousticFeatureSequence, FrontendConfig};
use crate::error::{Error, Result};
use crate::tokenizer::BbpeVocab;

/// One manifest line: `audio_path<TAB>transcript[<TAB>label]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub line: usize,
    pub audio: PathBuf,
    pub transcript: String,
    pub label: Option<String>,
}

impl ManifestEntry {
    /// Stable example id: the audio file stem.
    pub fn id(&self) -> String {
        self.audio
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("line{}", self.line))
    }
}

/// Parses a manifest. Relative audio paths resolve against the manifest's
/// directory. Blank lines are ignored; any other malformed line is an error.
pub fn read_manifest(path: &Path, labeled: bool) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path, labeled)
}

pub fn parse_manifest(text: &str, path: &Path, labeled: bool) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let want = if labeled { 3 } else { 2 };
        if fields.len() < want {
            return Err(Error::format(
                path,
                format!("line {}: expected {want} tab-separated fields, got {}", i + 1, fields.len()),
            ));
        }
        let audio = PathBuf::from(fields[0]);
        let audio = if audio.is_relative() { base.join(audio) } else { audio };
        out.push(ManifestEntry {
            line: i + 1,
            audio,
            transcript: fields[1].to_string(),
            label: labeled.then(|| fields[2].trim().to_string()),
        });
    }
    Ok(out)
}

/// Where the cached features for `audio` live.
pub fn feature_cache_path(audio: &Path, cache_dir: Option<&Path>) -> PathBuf {
    match cache_dir {
        Some(dir) => {
            let stem = audio.file_stem().unwrap_or_default();
            dir.join(Path::new(stem).with_extension("feat"))
        }
        None => audio.with_extension("feat"),
    }
}

/// Reads cached features when present, else extracts from the WAV file.
pub fn load_features(
    audio: &Path,
    cache_dir: Option<&Path>,
    frontend: &FrontendConfig,
) -> Result<AcousticFeatureSequence> {
    let cache = feature_cache_path(audio, cache_dir);
    if cache.exists() {
        return audio::read_feature_cache(&cache);
    }
    let wave = audio::read_wav(audio)?;
    let mut seq = audio::extract(&wave, frontend)?;
    seq.source = Some(audio.display().to_string());
    Ok(seq)
}

/// A tokenized, featurized pair.
#[derive(Debug, Clone)]
pub struct PairExample {
    pub id: String,
    pub tokens: Vec<u32>,
    pub features: AcousticFeatureSequence,
    pub label: Option<String>,
}

/// Loads every entry in parallel; unreadable entries are skipped and counted.
pub fn load_pairs(
    entries: &[ManifestEntry],
    vocab: &BbpeVocab,
    frontend: &FrontendConfig,
    cache_dir: Option<&Path>,
) -> (Vec<PairExample>, usize) {
    let loaded: Vec<Option<PairExample>> = entries
        .par_iter()
        .map(|e| match load_features(&e.audio, cache_dir, frontend) {
            Ok(features) => Some(PairExample {
                id: e.id(),
                tokens: vocab.encode(&e.transcript).ids,
                features,
                label: e.label.clone(),
            }),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.audio.display());
                None
            }
        })
        .collect();
    let skipped = loaded.iter().filter(|x| x.is_none()).count();
    if skipped > 0 {
        log::warn!("skipped {skipped} of {} manifest entries", entries.len());
    }
    (loaded.into_iter().flatten().collect(), skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labeled_lines() {
        let text = "a.wav\thello there\thappy\n\n/abs/b.wav\tbye\tsad\n";
        let m = parse_manifest(text, Path::new("/data/m.tsv"), true).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].audio, PathBuf::from("/data/a.wav"));
        assert_eq!(m[0].label.as_deref(), Some("happy"));
        assert_eq!(m[1].audio, PathBuf::from("/abs/b.wav"));
        assert_eq!(m[1].id(), "b");
        assert!(parse_manifest("a.wav\tonly", Path::new("m"), true).is_err());
        assert!(parse_manifest("a.wav\tonly", Path::new("m"), false).is_ok());
    }

    #[test]
    fn cache_paths() {
        let a = Path::new("/x/utt1.wav");
        assert_eq!(feature_cache_path(a, None), PathBuf::from("/x/utt1.feat"));
        assert_eq!(
            feature_cache_path(a, Some(Path::new("/c"))),
            PathBuf::from("/c/utt1.feat")
        );
    }

    #[test]
    fn missing_audio_is_skipped() {
        let entries = parse_manifest("nope.wav\thi", Path::new("/nonexistent/m"), false).unwrap();
        let (pairs, skipped) = load_pairs(&entries, &BbpeVocab::bytes_only(), &FrontendConfig::default(), None);
        assert!(pairs.is_empty());
        assert_eq!(skipped, 1);
    }
}
