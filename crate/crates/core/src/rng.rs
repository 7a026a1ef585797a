//! Seeded random streams.
//!
//! One root seed is split into independent ChaCha streams so that, for
//! example, toggling augmentation never perturbs stroke initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Augment = 1,
    Backend = 2,
}

/// Deterministic generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed for constructing a [`crate::MockBackend`] belonging to a run.
pub fn backend_seed(seed: u64) -> u64 {
    use rand::Rng;
    stream_rng(seed, Stream::Backend).random()
}
