//! Named, reproducible random streams.
//!
//! Every consumer derives its generator from the root seed and a path-like
//! name (`precompute/projected`, `train/step_12`, ...). Per-trajectory
//! streams select a ChaCha stream id on top of that, so parallel simulation
//! gives the same numbers regardless of how work is split across threads.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Generator for the named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Generator for item `index` (trajectory, sequence, token) of a named substream.
pub fn indexed(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = substream(seed, name);
    rng.set_stream(index);
    rng
}

/// Fill `out` with i.i.d. standard normal draws.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
