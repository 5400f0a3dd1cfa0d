//! Seed derivation.
//!
//! Every stochastic step in a run draws from a generator seeded by mixing the
//! run seed with the step's coordinates (iteration, purpose tag, ...). This keeps
//! each step reproducible in isolation, which is what makes resume exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate. ChaCha output is specified, so streams
/// are identical across platforms.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Purpose tags for [`derive_seed`] paths.
pub mod stream {
    pub const SAMPLE: u64 = 1;
    pub const SELECT: u64 = 2;
    pub const MUTATE: u64 = 3;
    pub const PROMPT: u64 = 4;
    pub const CMAES: u64 = 5;
}
