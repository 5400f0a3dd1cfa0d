use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbedError, Embedder, EmbedderDescriptor, Embedding};
use crate::behavior::BehaviorImage;
use crate::rng::rng_from_seed;

const POOL: usize = 8;
const FEATURES: usize = POOL * POOL * 3;

/// Offline embedder with a shared image/text space.
///
/// Images are average-pooled to 8x8x3 (192 features); texts are hashed
/// token counts over 192 bins. Both go through the same seeded Gaussian
/// projection and are L2-normalized. An all-zero feature vector (black image,
/// whitespace-only text) is replaced by the all-ones vector before projection.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    descriptor: EmbedderDescriptor,
    seed: u64,
    /// Row-major `FEATURES x dim`.
    projection: Vec<f64>,
}

impl ToyEmbedder {
    pub const DEFAULT_SEED: u64 = 17;
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = rng_from_seed(seed);
        let projection = (0..FEATURES * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            descriptor: EmbedderDescriptor {
                backend_id: format!("toy-s{seed}-d{dim}"),
                dim,
                image: true,
                text: true,
            },
            seed,
            projection,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_features(image: &BehaviorImage) -> Vec<f64> {
        let block = BehaviorImage::SIZE / POOL;
        let mut features = vec![0.0; FEATURES];
        for by in 0..POOL {
            for bx in 0..POOL {
                for c in 0..3 {
                    let mut sum = 0.0;
                    for y in by * block..(by + 1) * block {
                        for x in bx * block..(bx + 1) * block {
                            sum += image.get(y, x, c);
                        }
                    }
                    features[(by * POOL + bx) * 3 + c] = sum / (block * block) as f64;
                }
            }
        }
        features
    }

    pub fn text_features(text: &str) -> Vec<f64> {
        let mut features = vec![0.0; FEATURES];
        for token in text.split_whitespace() {
            let digest = Sha256::digest(token.to_lowercase().as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            features[(h % FEATURES as u64) as usize] += 1.0;
        }
        features
    }

    fn project(&self, features: &[f64]) -> Result<Embedding, EmbedError> {
        let fallback;
        let features = if features.iter().all(|&f| f == 0.0) {
            fallback = vec![1.0; FEATURES];
            &fallback
        } else {
            features
        };
        let dim = self.descriptor.dim;
        let mut out = vec![0.0; dim];
        for (f, row) in features.iter().zip(self.projection.chunks_exact(dim)) {
            if *f != 0.0 {
                for (o, p) in out.iter_mut().zip(row) {
                    *o += f * p;
                }
            }
        }
        Embedding::normalized(self.descriptor.backend_id.as_str(), out)
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED, Self::DEFAULT_DIM)
    }
}

impl Embedder for ToyEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed_image(&self, image: &BehaviorImage) -> Result<Embedding, EmbedError> {
        self.project(&Self::image_features(image))
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.project(&Self::text_features(text))
    }
}
