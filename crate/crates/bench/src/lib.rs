//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spgp::spgp::SpgpKernel;
use spgp::{ArdParams, Matrix, ProjParams, SpgpParams, SpgpVariant, Vector};

/// A fixed random model with `m` pseudo-inputs over `d` input dimensions.
pub fn model(variant: SpgpVariant, m: usize, d: usize, g: usize, seed: u64) -> SpgpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = if variant.has_dr() {
        SpgpKernel::Proj(ProjParams::new(1.0, Matrix::from_fn(g, d, |_, _| rng.random_range(-1.0..1.0))).unwrap())
    } else {
        SpgpKernel::Ard(ArdParams::new(1.0, vec![1.0; d]).unwrap())
    };
    let pd = if variant.has_dr() { g } else { d };
    let xbar = Matrix::from_fn(m, pd, |_, _| rng.random_range(-2.0..2.0));
    let log_h = variant.has_hs().then(|| vec![-2.0; m]);
    SpgpParams::new(variant, kernel, xbar, log_h, 0.1).unwrap()
}

/// Uniform inputs on `[-2, 2]^d` and noisy targets.
pub fn data(n: usize, d: usize, seed: u64) -> (Matrix, Vector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = Vector::from_fn(n, |i, _| x.row(i).sum().sin() + 0.1 * rng.random_range(-1.0..1.0));
    (x, y)
}
