//! Shared fixtures for the benchmarks.

use homodecouple::{build_decoupling_block, PulseSequence, SpinSystem};
use nalgebra::{DMatrix, DVector};

pub const A: f64 = 1e3;
pub const DT: f64 = 2e-4;

pub fn system() -> SpinSystem {
    SpinSystem::ising_hz(120.0, 100.0, 1.0)
}

pub fn block() -> PulseSequence {
    build_decoupling_block(&system(), A, DT).expect("valid block")
}

/// Gaussian-blur design matrix (`m × k`) and a two-line right-hand side.
pub fn nnls_problem(m: usize, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let sigma = 3.0;
    let a = DMatrix::from_fn(m, k, |i, j| {
        let centre = (j as f64 + 0.5) * m as f64 / k as f64;
        (-0.5 * ((i as f64 - centre) / sigma).powi(2)).exp()
    });
    let mut x = DVector::zeros(k);
    x[k / 3] = 1.0;
    x[2 * k / 3] = 0.8;
    let b = &a * x;
    (a, b)
}
