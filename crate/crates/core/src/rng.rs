//! Seeded RNG plumbing. All randomness in the crate flows through ChaCha8
//! streams derived from a user seed, and parameters are always sampled in
//! `f64` before casting so that `f32` and `f64` models built from one seed
//! agree on their underlying values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;
use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a substream id (splitmix64 finalizer),
/// so batch items / epochs can be generated independently yet reproducibly.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform<T: Scalar>(rng: &mut SeededRng, lo: f64, hi: f64) -> T {
    T::of(rng.random_range(lo..hi))
}

/// Matrix with entries uniform in `[-limit, limit)`.
pub fn uniform_mat<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize, limit: f64) -> Mat<T> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::of(rng.random_range(-limit..limit)));
    }
    Mat::from_vec(rows, cols, data)
}

/// Fan-in scaled uniform init, `limit = 1/sqrt(fan_in)`.
pub fn fan_in_mat<T: Scalar>(rng: &mut SeededRng, fan_in: usize, rows: usize, cols: usize) -> Mat<T> {
    uniform_mat(rng, rows, cols, 1.0 / (fan_in as f64).sqrt())
}
