//! Text conditioning.
//!
//! The pre-trained text encoder is external. Prompts are turned into token
//! matrices either by looking up precomputed embeddings in an archive or by a
//! deterministic hash-based stub.
//!
//! Archive layout, little-endian:
//!
//! ```text
//! magic   b"DYEA"
//! version u16 (= 1)
//! count   u32
//! count × { prompt_hash u64, S u32, d u32, values f32 × S·d }
//! ```
//!
//! `prompt_hash` is the first eight bytes (little-endian) of the SHA-256 of
//! the prompt's UTF-8 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAX_TOKENS: usize = 77;
pub const DEFAULT_WIDTH: usize = 768;
pub const ARCHIVE_MAGIC: &[u8; 4] = b"DYEA";
pub const ARCHIVE_VERSION: u16 = 1;

/// Per-token text features.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tensor<f32>,
    pub prompt: String,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

pub fn prompt_hash(prompt: &str) -> u64 {
    let digest = Sha256::digest(prompt.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;

    fn embed(&self, prompt: &str) -> Result<TextEmbedding>;

    /// Embedding of the empty prompt, used as the unconditional branch.
    fn unconditional(&self) -> Result<TextEmbedding> {
        self.embed("")
    }
}

/// Deterministic stand-in: each whitespace token (and its position) seeds a
/// Gaussian vector scaled to unit length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubEncoder {
    pub width: usize,
    pub seed: u64,
}

impl Default for StubEncoder {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            seed: 0,
        }
    }
}

impl StubEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self { width, seed }
    }

    fn token_row(&self, token: &str, position: usize) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((position as u64).to_le_bytes());
        h.update(token.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut v: Vec<f64> = (0..self.width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x /= norm);
        v.into_iter().map(|x| x as f32).collect()
    }
}

impl TextEncoder for StubEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let mut words: Vec<&str> = prompt.split_whitespace().take(MAX_TOKENS).collect();
        if words.is_empty() {
            // the null condition still needs one token
            words.push("");
        }
        let mut data = Vec::with_capacity(words.len() * self.width);
        for (pos, w) in words.iter().enumerate() {
            data.extend(self.token_row(w, pos));
        }
        Ok(TextEmbedding {
            tokens: Tensor::from_rows(words.len(), self.width, data),
            prompt: prompt.to_owned(),
        })
    }
}

/// Precomputed embeddings keyed by prompt hash.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingArchive {
    width: Option<usize>,
    entries: BTreeMap<u64, Tensor<f32>>,
}

impl EmbeddingArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores `tokens` (S × d) for `prompt`, truncated to 77 rows.
    pub fn insert(&mut self, prompt: &str, tokens: Tensor<f32>) -> Result<()> {
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::Validation(
                "embedding must have at least one token and one channel".into(),
            ));
        }
        if !tokens.all_finite() {
            return Err(Error::Validation(
                "embedding holds non-finite values".into(),
            ));
        }
        match self.width {
            Some(w) if w != tokens.cols() => {
                return Err(Error::Validation(format!(
                    "archive width is {w}, got {}",
                    tokens.cols()
                )))
            }
            _ => self.width = Some(tokens.cols()),
        }
        let s = tokens.rows().min(MAX_TOKENS);
        self.entries
            .insert(prompt_hash(prompt), tokens.slice_rows(0, s));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (h, t) in &self.entries {
            out.extend_from_slice(&h.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("embedding archive: {m}"));
        if bytes.len() < 10 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != ARCHIVE_VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        let mut pos = 10usize;
        let mut archive = Self::new();
        for _ in 0..count {
            let head = bytes
                .get(pos..pos + 16)
                .ok_or_else(|| bad("truncated entry header"))?;
            let hash = u64::from_le_bytes(head[..8].try_into().expect("8 bytes"));
            let s = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
            let d = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
            pos += 16;
            let len = s
                .checked_mul(d)
                .and_then(|x| x.checked_mul(4))
                .ok_or_else(|| bad("size overflow"))?;
            let raw = bytes
                .get(pos..pos + len)
                .ok_or_else(|| bad("truncated values"))?;
            pos += len;
            if s == 0 || d == 0 || archive.width.is_some_and(|w| w != d) {
                return Err(bad("inconsistent entry shape"));
            }
            archive.width = Some(d);
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            archive.entries.insert(hash, Tensor::from_rows(s, d, data));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl TextEncoder for EmbeddingArchive {
    fn width(&self) -> usize {
        self.width.unwrap_or(0)
    }

    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let hash = prompt_hash(prompt);
        let tokens = self
            .entries
            .get(&hash)
            .ok_or_else(|| Error::MissingEmbedding {
                prompt: prompt.to_owned(),
                hash,
            })?;
        Ok(TextEmbedding {
            tokens: tokens.clone(),
            prompt: prompt.to_owned(),
        })
    }
}

/// Provider selection as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TextProviderConfig {
    Stub { width: usize, seed: u64 },
    File { path: String },
}

impl Default for TextProviderConfig {
    fn default() -> Self {
        TextProviderConfig::Stub {
            width: DEFAULT_WIDTH,
            seed: 0,
        }
    }
}

impl TextProviderConfig {
    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match self {
            TextProviderConfig::Stub { width, seed } => Box::new(StubEncoder::new(*width, *seed)),
            TextProviderConfig::File { path } => Box::new(EmbeddingArchive::load(Path::new(path))?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_with_unit_rows() {
        let enc = StubEncoder::new(32, 3);
        let a = enc.embed("walk").unwrap();
        assert_eq!(a, enc.embed("walk").unwrap());
        for r in 0..a.len() {
            let norm: f32 = a.tokens.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
        }
        assert_ne!(a.tokens, enc.embed("run").unwrap().tokens);
    }

    #[test]
    fn long_prompts_truncate_to_77_tokens() {
        let prompt = (0..100)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let e = StubEncoder::new(8, 0).embed(&prompt).unwrap();
        assert_eq!(e.len(), 77);
        let mut archive = EmbeddingArchive::new();
        archive
            .insert(&prompt, Tensor::full(&[100, 4], 0.5))
            .unwrap();
        assert_eq!(archive.embed(&prompt).unwrap().len(), 77);
    }

    #[test]
    fn empty_prompt_has_one_token() {
        let e = StubEncoder::new(8, 0).unconditional().unwrap();
        assert_eq!(e.len(), 1);
    }

    #[test]
    fn archive_round_trip_and_miss() {
        let mut archive = EmbeddingArchive::new();
        archive
            .insert(
                "jump",
                Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f32 * 0.25),
            )
            .unwrap();
        archive.insert("", Tensor::full(&[1, 4], 0.0)).unwrap();
        let bytes = archive.to_bytes();
        let back = EmbeddingArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, archive);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.embed("jump").unwrap().tokens.at(2, 3), 2.75);
        assert!(matches!(
            back.embed("fly"),
            Err(Error::MissingEmbedding { .. })
        ));
        assert!(archive.insert("x", Tensor::full(&[1, 5], 0.0)).is_err());
    }
}
