//! Shared fixtures for the criterion benches.

use distflash_core::{Matrix, Rng};

/// Seeded `(q, k, v)` of shape `n × d`.
pub fn qkv(seed: u64, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    (rng.matrix(n, d), rng.matrix(n, d), rng.matrix(n, d))
}
