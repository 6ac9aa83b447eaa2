//! Deterministic text encoder and cosine similarity.
//!
//! The default encoder hashes character n-grams into a fixed number of
//! buckets with a ±1 sign per n-gram, then L2-normalizes. It needs no model
//! weights and gives identical vectors on every machine. Anything that
//! implements [`TextEncoder`] can replace it.

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dimension: 768,
            ngram_min: 1,
            ngram_max: 3,
            hash_seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 8 {
            return Err(Error::Config(format!(
                "embedding dimension {} < 8",
                self.dimension
            )));
        }
        if self.ngram_min < 1 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!(
                "invalid n-gram bounds [{}, {}]",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }
}

pub trait TextEncoder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Vector;
}

#[derive(Debug, Clone)]
pub struct HashedNgramEncoder {
    config: EmbedderConfig,
}

impl HashedNgramEncoder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }
}

impl Default for HashedNgramEncoder {
    fn default() -> Self {
        Self {
            config: EmbedderConfig::default(),
        }
    }
}

/// Calls `f` with every character n-gram of `text` for n in `[min, max]`.
pub fn for_each_char_ngram(text: &str, min: usize, max: usize, mut f: impl FnMut(&str)) {
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let chars = bounds.len() - 1;
    for n in min..=max {
        if n > chars {
            break;
        }
        for start in 0..=chars - n {
            f(&text[bounds[start]..bounds[start + n]]);
        }
    }
}

impl TextEncoder for HashedNgramEncoder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, text: &str) -> Vector {
        let dim = self.config.dimension;
        let mut v = vec![0.0f64; dim];
        for_each_char_ngram(text, self.config.ngram_min, self.config.ngram_max, |gram| {
            let h = xxh3_64_with_seed(gram.as_bytes(), self.config.hash_seed);
            let bucket = ((h >> 1) % dim as u64) as usize;
            v[bucket] += if h & 1 == 0 { 1.0 } else { -1.0 };
        });
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Vector(v)
    }
}

/// Cosine similarity; 0.0 when either side is the zero vector.
pub fn cosine_sim(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_zero_vector() {
        let enc = HashedNgramEncoder::default();
        let v = enc.embed("");
        assert!(v.is_zero());
        assert_eq!(v.dim(), 768);
    }

    #[test]
    fn nonempty_text_is_unit_norm() {
        let enc = HashedNgramEncoder::default();
        for text in ["a", "hospital", "东方医院", "flu shot near me"] {
            assert!((enc.embed(text).norm() - 1.0).abs() < 1e-6, "{text}");
        }
    }

    #[test]
    fn self_similarity_and_zero_convention() {
        let enc = HashedNgramEncoder::default();
        let v = enc.embed("city hospital");
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine_sim(&v, &Vector::zeros(768)).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_dimensions_error() {
        let err = cosine_sim(&Vector::zeros(8), &Vector::zeros(9)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn ngram_enumeration() {
        let mut grams = Vec::new();
        for_each_char_ngram("abc", 1, 3, |g| grams.push(g.to_string()));
        assert_eq!(grams, vec!["a", "b", "c", "ab", "bc", "abc"]);
        grams.clear();
        for_each_char_ngram("医院", 2, 5, |g| grams.push(g.to_string()));
        assert_eq!(grams, vec!["医院"]);
    }

    #[test]
    fn config_validation() {
        assert!(HashedNgramEncoder::new(EmbedderConfig {
            dimension: 4,
            ..Default::default()
        })
        .is_err());
        assert!(HashedNgramEncoder::new(EmbedderConfig {
            ngram_min: 3,
            ngram_max: 2,
            ..Default::default()
        })
        .is_err());
    }
}
