//! Counter-based seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by a seed derived
//! from `(parent seed, index)`, so work items can run in any order (or in
//! parallel) and still reproduce bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_mul(GOLDEN).wrapping_add(1)))
}

pub fn stream(seed: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, index))
}

/// Draws from the log-uniform distribution on `[lo, hi]` (`lo > 0`).
pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    let (l, h) = (lo.ln(), hi.ln());
    (l + (h - l) * rng.gen::<f64>()).exp()
}

/// Log-uniform integer draw, rounded and clamped into `[lo, hi]`.
pub fn log_uniform_int<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    let v = log_uniform(rng, lo as f64, hi as f64).round() as usize;
    v.clamp(lo, hi)
}
