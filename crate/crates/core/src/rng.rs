//! Deterministic RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for one Monte-Carlo run, keyed by `(seed, point, realization)`.
pub fn stream(seed: u64, point: u64, realization: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(point.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ realization);
    rng
}
