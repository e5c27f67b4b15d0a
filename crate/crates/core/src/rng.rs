//! Seeded, splittable randomness.
//!
//! Every stream is a ChaCha8 generator keyed by the 64-bit seed and selected
//! by a stream id, so identical seeds reproduce identical values on every
//! platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Independent generator for a named sub-stream.
    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    /// Child state derived from this seed and `id`.
    pub fn split(&self, id: u64) -> RngState {
        RngState::new(self.stream(id).gen())
    }
}

/// Uniform sample in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
