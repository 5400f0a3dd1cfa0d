//! Semantic embeddings of behaviors and goal texts.
//!
//! All backends return unit-norm vectors. A backend used for goals must embed
//! both images and text into the same space.

mod cache;
mod remote;
mod toy;

use std::sync::Arc;

use thiserror::Error;

use crate::behavior::BehaviorImage;

pub use cache::{CachedEmbedder, EmbeddingCache};
pub use remote::{RemoteConfig, RemoteEmbedder};
pub use toy::ToyEmbedder;

pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: usize, message: String },
    #[error("embedding service protocol error: {0}")]
    Protocol(String),
    #[error("backend mismatch: {left} vs {right}")]
    BackendMismatch { left: String, right: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("backend {0} does not support {1} inputs")]
    Unsupported(String, &'static str),
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error(transparent)]
    Image(#[from] crate::behavior::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unit-norm vector tagged with the backend that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    backend_id: Arc<str>,
    vector: Vec<f64>,
}

impl Embedding {
    /// Normalizes `raw` to unit length.
    pub fn normalized(backend_id: impl Into<Arc<str>>, raw: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        Ok(Self {
            backend_id: backend_id.into(),
            vector: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    /// Wraps a vector that is already unit norm (e.g. loaded from disk),
    /// keeping its exact bits.
    pub fn from_unit(backend_id: impl Into<Arc<str>>, vector: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::Protocol(format!("vector norm {norm} is not 1")));
        }
        Ok(Self { backend_id: backend_id.into(), vector })
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.vector, &other.vector)
    }

    /// `1 - <a, b>`, in `[0, 2]` for unit vectors.
    pub fn cosine_distance(&self, other: &Embedding) -> Result<f64, EmbedError> {
        if self.backend_id != other.backend_id {
            return Err(EmbedError::BackendMismatch {
                left: self.backend_id.to_string(),
                right: other.backend_id.to_string(),
            });
        }
        if self.dim() != other.dim() {
            return Err(EmbedError::DimensionMismatch { expected: self.dim(), actual: other.dim() });
        }
        Ok(cosine_distance(&self.vector, &other.vector))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine distance between unit vectors, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedderDescriptor {
    pub backend_id: String,
    pub dim: usize,
    pub image: bool,
    pub text: bool,
}

impl EmbedderDescriptor {
    pub fn supports_goals(&self) -> bool {
        self.image && self.text
    }
}

pub trait Embedder: Send + Sync {
    fn descriptor(&self) -> &EmbedderDescriptor;

    fn embed_image(&self, image: &BehaviorImage) -> Result<Embedding, EmbedError>;

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError>;

    fn embed_images(&self, images: &[&BehaviorImage]) -> Result<Vec<Embedding>, EmbedError> {
        images.iter().map(|img| self.embed_image(img)).collect()
    }

    fn backend_id(&self) -> &str {
        &self.descriptor().backend_id
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn descriptor(&self) -> &EmbedderDescriptor {
        (**self).descriptor()
    }

    fn embed_image(&self, image: &BehaviorImage) -> Result<Embedding, EmbedError> {
        (**self).embed_image(image)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        (**self).embed_text(text)
    }

    fn embed_images(&self, images: &[&BehaviorImage]) -> Result<Vec<Embedding>, EmbedError> {
        (**self).embed_images(images)
    }
}
