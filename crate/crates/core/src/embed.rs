//! Text embeddings used for text similarity, model conditioning and the mock
//! image-text scorer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::template::parse_names;
use crate::error::{Error, Result};
use crate::hash::fnv1a64;

pub const BUILTIN_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    values: Vec<f64>,
    source: EmbeddingSource,
}

impl TextEmbedding {
    pub fn new(values: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding must be non-empty and finite"));
        }
        if norm(&values) == 0.0 {
            return Err(Error::invalid("embedding has zero norm"));
        }
        Ok(Self { values, source })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }
}

pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<TextEmbedding>;
    fn dim(&self) -> usize;
}

/// Offline embedder: each class name in a caption maps to a fixed
/// pseudo-random unit vector; the caption embeds as their normalized mean.
///
/// Only integer draws, sums and square roots are involved, so the result is
/// bit-identical on every IEEE-754 platform.
#[derive(Debug, Clone)]
pub struct BuiltinEmbedder {
    dim: usize,
}

impl Default for BuiltinEmbedder {
    fn default() -> Self {
        Self { dim: BUILTIN_DIM }
    }
}

impl BuiltinEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    pub fn name_vector(&self, name: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name.as_bytes()));
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 0.0 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

impl TextEmbedder for BuiltinEmbedder {
    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let mut names = parse_names(text)?;
        names.sort_unstable();
        names.dedup();
        let mut acc = vec![0.0; self.dim];
        for name in &names {
            for (a, v) in acc.iter_mut().zip(self.name_vector(name)) {
                *a += v;
            }
        }
        let n = norm(&acc);
        if n == 0.0 {
            return Err(Error::invalid(format!("embedding of {text:?} vanished")));
        }
        TextEmbedding::new(acc.into_iter().map(|x| x / n).collect(), EmbeddingSource::Builtin)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(u: &TextEmbedding, v: &TextEmbedding) -> Result<f64> {
    cosine_slices(&u.values, &v.values)
}

pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("dimension mismatch {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero-norm vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
