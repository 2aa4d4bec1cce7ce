//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CTALCKPT" u16 version
//! u32 config_len, config_len bytes of `key=value\n` lines
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank × u32 dims, f32 payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CTALCKPT";
const VERSION: u16 = 1;

/// A parameter store plus the string config it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: BTreeMap<String, String>, params: ParamStore<f32>) -> Self {
        Self { config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.config {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let clen = r.u32()?;
        let text = std::str::from_utf8(r.take(clen)?)
            .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
        let mut config = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad config line {line:?}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()?;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.contains(&name) {
                return Err(Error::format(path, format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// What happened to each name when moving weights between models.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Source tensors deliberately discarded.
    pub dropped: Vec<String>,
    /// Target tensors deliberately left at their fresh initialization.
    pub fresh: Vec<String>,
    /// Names matched by neither side nor any allowlist. Always empty on success.
    pub unmatched: Vec<String>,
}

/// Copies `src` into `dst` by name.
///
/// Source names under `drop_prefixes` are skipped; target names under
/// `fresh_prefixes` keep their values. Any other name missing on either side,
/// or a shape mismatch, is an error.
pub fn transfer(
    src: &ParamStore<f32>,
    dst: &mut ParamStore<f32>,
    drop_prefixes: &[&str],
    fresh_prefixes: &[&str],
) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let starts = |name: &str, prefixes: &[&str]| prefixes.iter().any(|p| name.starts_with(p));
    for (name, t) in src.iter() {
        if starts(name, drop_prefixes) {
            report.dropped.push(name.to_string());
            continue;
        }
        match dst.get_mut(name) {
            Some(d) if d.shape() == t.shape() => {
                *d = t.clone();
                report.loaded.push(name.to_string());
            }
            Some(d) => return Err(Error::shape("checkpoint tensor", t.shape(), d.shape())),
            None => report.unmatched.push(name.to_string()),
        }
    }
    for name in dst.names() {
        if src.contains(name) {
            continue;
        }
        if starts(name, fresh_prefixes) {
            report.fresh.push(name.clone());
        } else {
            report.unmatched.push(name.clone());
        }
    }
    if !report.unmatched.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint names not covered by the allowlist: {}",
            report.unmatched.join(", ")
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_vec(vec![2, 3], vec![1., -2., 3.5, 0., 1e-8, f32::MAX]).unwrap());
        s.insert("b", Tensor::from_vec(vec![1], vec![0.25]).unwrap());
        s
    }

    #[test]
    fn byte_exact_round_trip() {
        let mut cfg = BTreeMap::new();
        cfg.insert("model.hidden".into(), "64".into());
        let ck = Checkpoint::new(cfg, store());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let bytes = Checkpoint::new(BTreeMap::new(), store()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err());
    }

    #[test]
    fn transfer_respects_allowlists() {
        let src = store();
        let mut dst = ParamStore::new();
        dst.insert("a.weight", Tensor::zeros(vec![2, 3]));
        dst.insert("head.w", Tensor::zeros(vec![1]));
        let err = transfer(&src, &mut dst.clone(), &[], &["head."]);
        assert!(err.is_err());
        let report = transfer(&src, &mut dst, &["b"], &["head."]).unwrap();
        assert_eq!(report.loaded, vec!["a.weight"]);
        assert_eq!(report.dropped, vec!["b"]);
        assert_eq!(report.fresh, vec!["head.w"]);
        assert_eq!(dst.get("a.weight").unwrap(), src.get("a.weight").unwrap());
    }
}
