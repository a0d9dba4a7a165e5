//! Plain-text corpora read as byte tokens.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    /// Hex SHA-256 of `bytes`.
    pub hash: String,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let hash = hex::encode(Sha256::digest(&bytes));
        Self { bytes, hash }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() {
            return Err(Error::Empty(format!("corpus {} is empty", path.display())));
        }
        Ok(Self::from_bytes(bytes))
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.bytes.iter().map(|&b| b as u32).collect()
    }

    /// Consecutive non-overlapping windows of `len` tokens, at most `max` of
    /// them. A trailing partial window is dropped.
    pub fn samples(&self, len: usize, max: Option<usize>) -> Vec<Vec<u32>> {
        if len == 0 {
            return Vec::new();
        }
        self.bytes
            .chunks_exact(len)
            .take(max.unwrap_or(usize::MAX))
            .map(|w| w.iter().map(|&b| b as u32).collect())
            .collect()
    }
}

/// Hex SHA-256 over a set of token samples, sensitive to order and boundaries.
pub fn samples_hash(samples: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.len() as u64).to_le_bytes());
        for &t in s {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
