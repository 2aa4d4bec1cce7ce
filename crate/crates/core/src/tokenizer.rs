//! Byte-level BPE: training, encoding, decoding and the vocab file format.
//!
//! Ids `0..4` are the specials `<s>`, `</s>`, `<mask>`, `<pad>`; ids `4..260`
//! are the 256 raw bytes; merged tokens follow in merge order. Text is first
//! split into chunks where a single space sticks to the front of the following
//! word, so merges never cross word boundaries and decoding is a plain byte
//! concatenation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const MASK: u32 = 2;
pub const PAD: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
pub const BYTE_OFFSET: u32 = NUM_SPECIALS;
pub const BASE_VOCAB: usize = NUM_SPECIALS as usize + 256;

const SPECIAL_NAMES: [&str; 4] = ["<s>", "</s>", "<mask>", "<pad>"];
const VOCAB_FORMAT_VERSION: u32 = 1;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BbpeVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

/// Token ids of one text, wrapped in `<s>` … `</s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Space,
    OtherSpace,
    Letter,
    Digit,
    Punct,
}

fn class(b: u8) -> ByteClass {
    match b {
        b' ' => ByteClass::Space,
        b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => ByteClass::OtherSpace,
        b'0'..=b'9' => ByteClass::Digit,
        b'a'..=b'z' | b'A'..=b'Z' | 0x80..=0xff => ByteClass::Letter,
        _ => ByteClass::Punct,
    }
}

fn is_ws(c: ByteClass) -> bool {
    matches!(c, ByteClass::Space | ByteClass::OtherSpace)
}

/// Splits bytes into merge chunks; concatenating the chunks gives back the input.
pub fn pre_tokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = class(bytes[i]);
        if is_ws(c) {
            let mut j = i;
            while j < bytes.len() && is_ws(class(bytes[j])) {
                j += 1;
            }
            let followed_by_word = j < bytes.len();
            if followed_by_word && bytes[j - 1] == b' ' {
                // the last space joins the next word
                if j - 1 > i {
                    chunks.push(&bytes[i..j - 1]);
                }
                let start = j - 1;
                let wc = class(bytes[j]);
                let mut k = j;
                while k < bytes.len() && class(bytes[k]) == wc {
                    k += 1;
                }
                chunks.push(&bytes[start..k]);
                i = k;
            } else {
                chunks.push(&bytes[i..j]);
                i = j;
            }
        } else {
            let mut k = i;
            while k < bytes.len() && class(bytes[k]) == c {
                k += 1;
            }
            chunks.push(&bytes[i..k]);
            i = k;
        }
    }
    chunks
}

struct Word {
    symbols: Vec<u32>,
    count: i64,
}

fn pair_counts_of(symbols: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    symbols.windows(2).map(|w| (w[0], w[1]))
}

fn merge_symbols(symbols: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Greedy most-frequent-pair training up to `vocab_size` ids (specials and bytes included).
pub fn train_bbpe<I, S>(corpus: I, vocab_size: usize) -> Result<BbpeVocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_size < BASE_VOCAB {
        return Err(Error::InvalidArgument(format!(
            "vocab_size must be at least {BASE_VOCAB}, got {vocab_size}"
        )));
    }
    let mut freqs: BTreeMap<Vec<u8>, i64> = BTreeMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for chunk in pre_tokenize(line.as_ref().as_bytes()) {
            *freqs.entry(chunk.to_vec()).or_default() += 1;
        }
    }
    if lines == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut vocab = BbpeVocab::bytes_only();
    let mut words: Vec<Word> = freqs
        .into_iter()
        .map(|(bytes, count)| Word {
            symbols: bytes.iter().map(|&b| b as u32 + BYTE_OFFSET).collect(),
            count,
        })
        .collect();
    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurs: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in pair_counts_of(&w.symbols) {
            *counts.entry(p).or_default() += w.count;
            occurs.entry(p).or_default().insert(wi);
        }
    }

    while vocab.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller byte strings win ties
                    let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                    let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let new_id = vocab.push_merge(pair);
        let affected: Vec<usize> = occurs
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for wi in affected {
            let word = &mut words[wi];
            for p in pair_counts_of(&word.symbols) {
                if let Some(c) = counts.get_mut(&p) {
                    *c -= word.count;
                    if *c <= 0 {
                        counts.remove(&p);
                    }
                }
                if let Some(set) = occurs.get_mut(&p) {
                    set.remove(&wi);
                }
            }
            word.symbols = merge_symbols(&word.symbols, pair, new_id);
            for p in pair_counts_of(&word.symbols) {
                *counts.entry(p).or_default() += word.count;
                occurs.entry(p).or_default().insert(wi);
            }
        }
        counts.remove(&pair);
        occurs.remove(&pair);
    }
    Ok(vocab)
}

#[derive(Serialize, Deserialize)]
struct VocabHeader {
    format: String,
    version: u32,
    vocab_size: usize,
    specials: BTreeMap<String, u32>,
}

impl BbpeVocab {
    /// Specials plus the 256 byte tokens, no merges.
    pub fn bytes_only() -> Self {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIALS as usize];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Self {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.tokens.push(bytes);
        self.ranks.insert(pair, (self.merges.len(), id));
        self.merges.push(pair);
        id
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.tokens
            .iter()
            .skip(NUM_SPECIALS as usize)
            .position(|t| t == bytes)
            .map(|i| i as u32 + NUM_SPECIALS)
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
        loop {
            let best = pair_counts_of(&symbols)
                .filter_map(|p| self.ranks.get(&p).map(|&(rank, id)| (rank, p, id)))
                .min();
            let Some((_, pair, id)) = best else { break };
            symbols = merge_symbols(&symbols, pair, id);
        }
        out.extend_from_slice(&symbols);
    }

    /// Encodes raw bytes without the `<s>`/`</s>` wrapper.
    pub fn encode_raw(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(bytes) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_raw(bytes));
        ids.push(EOS);
        ids
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence {
            ids: self.encode_bytes(text.as_bytes()),
            text: text.to_string(),
        }
    }

    /// Concatenates token bytes, skipping specials.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.tokens.get(id as usize).ok_or(Error::UnknownToken(id))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes)
            .map_err(|e| Error::InvalidArgument(format!("decoded bytes are not UTF-8: {e}")))
    }

    pub fn to_file_string(&self) -> String {
        let header = VocabHeader {
            format: "ctal-bbpe".into(),
            version: VOCAB_FORMAT_VERSION,
            vocab_size: self.len(),
            specials: SPECIAL_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i as u32))
                .collect(),
        };
        let table = byte_to_unicode();
        let show = |id: u32| -> String {
            self.tokens[id as usize]
                .iter()
                .map(|&b| table[b as usize])
                .collect()
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for &(a, b) in &self.merges {
            out.push_str(&show(a));
            out.push(' ');
            out.push_str(&show(b));
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header: VocabHeader = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty vocab file"))
            .and_then(|l| {
                serde_json::from_str(l).map_err(|e| Error::format(path, format!("header: {e}")))
            })?;
        if header.version != VOCAB_FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", header.version)));
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if header.specials.get(*name) != Some(&(i as u32)) {
                return Err(Error::format(path, format!("special {name} must have id {i}")));
            }
        }
        let inverse: HashMap<char, u8> = byte_to_unicode()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let mut vocab = Self::bytes_only();
        let mut lookup: HashMap<Vec<u8>, u32> = vocab
            .tokens
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS as usize)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for (n, line) in lines.enumerate() {
            let err = |msg: &str| Error::format(path, format!("merge line {}: {msg}", n + 2));
            let (a, b) = line.split_once(' ').ok_or_else(|| err("expected two tokens"))?;
            let to_bytes = |s: &str| -> Result<Vec<u8>> {
                s.chars()
                    .map(|c| inverse.get(&c).copied().ok_or_else(|| err("unmapped character")))
                    .collect()
            };
            let (ba, bb) = (to_bytes(a)?, to_bytes(b)?);
            let ia = *lookup.get(&ba).ok_or_else(|| err("unknown left token"))?;
            let ib = *lookup.get(&bb).ok_or_else(|| err("unknown right token"))?;
            let id = vocab.push_merge((ia, ib));
            lookup.insert(vocab.tokens[id as usize].clone(), id);
        }
        if vocab.len() != header.vocab_size {
            return Err(Error::format(
                path,
                format!("header says {} ids, merges give {}", header.vocab_size, vocab.len()),
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&text, path)
    }
}

/// Printable stand-in for every byte, so merge lines stay whitespace-free.
fn byte_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xa1..=0xac | 0xae..=0xff);
        table[b as usize] = if printable {
            b as char
        } else {
            let c = char::from_u32(256 + extra).unwrap();
            extra += 1;
            c
        };
    }
    table
}
