//! Embedding-space math: cosine similarity, mean pairwise similarity, and
//! the SEU score (1 minus the average pairwise cosine of response embeddings).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding must be non-empty")]
    Empty,
    #[error("embedding has zero Euclidean norm")]
    ZeroNorm,
    #[error("embedding contains a non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("need at least 2 embeddings, got {0}")]
    TooFew(usize),
}

/// A D-dimensional embedding. Zero-norm and non-finite vectors are rejected
/// at construction so downstream cosine math never sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.is_empty() {
            return Err(GeometryError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        let norm_sq: f64 = values.iter().map(|v| v * v).sum();
        if norm_sq <= 0.0 {
            return Err(GeometryError::ZeroNorm);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Cosine similarity over raw slices. Clamped to [-1, 1] after rounding.
/// Callers must guarantee equal dims and nonzero norms.
pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    // sqrt of the product (not product of sqrts) so a vector paired with
    // itself yields exactly 1.0
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(cosine_slices(a.values(), b.values()))
}

fn check_set(embeddings: &[EmbeddingVector]) -> Result<(), GeometryError> {
    if embeddings.len() < 2 {
        return Err(GeometryError::TooFew(embeddings.len()));
    }
    let d = embeddings[0].dim();
    for e in embeddings {
        if e.dim() != d {
            return Err(GeometryError::DimensionMismatch {
                left: d,
                right: e.dim(),
            });
        }
    }
    Ok(())
}

/// Average cosine over all unordered pairs: 2/(M(M-1)) * sum_{i<j} cos(e_i, e_j).
pub fn mean_pairwise_similarity(embeddings: &[EmbeddingVector]) -> Result<f64, GeometryError> {
    check_set(embeddings)?;
    Ok(mean_pairwise_slices(
        &embeddings.iter().map(|e| e.values()).collect::<Vec<_>>(),
    ))
}

pub(crate) fn mean_pairwise_slices(vectors: &[&[f64]]) -> f64 {
    let m = vectors.len();
    let mut total = 0.0;
    for i in 0..m - 1 {
        for j in i + 1..m {
            total += cosine_slices(vectors[i], vectors[j]);
        }
    }
    total * 2.0 / (m as f64 * (m - 1) as f64)
}

/// Semantic embedding uncertainty: 1 minus the mean pairwise cosine
/// similarity of the M response embeddings. Range [0, 2]; 0 iff all
/// pairwise cosines are 1.
pub fn seu(embeddings: &[EmbeddingVector]) -> Result<f64, GeometryError> {
    Ok(1.0 - mean_pairwise_similarity(embeddings)?)
}
