//! Shared inputs for the benchmarks.

use csi_ident::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noisy series with occasional spikes, like one subcarrier's amplitude.
pub fn spiky_series(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let v = 40.0 + rng.random_range(-1.0..1.0);
            if rng.random_bool(0.01) { v + 15.0 } else { v }
        })
        .collect()
}

/// Random `[rows, cols]` input window.
pub fn window(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([rows, cols], |_| rng.random_range(-1.0..1.0))
}
