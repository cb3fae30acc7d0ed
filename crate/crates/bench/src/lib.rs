//! Shared fixtures for the benchmarks.

use degentaxis_core::solver::SimState;
use degentaxis_core::{FKind, Grid, ModelParams, ScalarField};

/// Standard-scenario parameters with `l = 1`.
pub fn params() -> ModelParams {
    ModelParams::new(2.0, 1.5, 1.0, 1.0, FKind::PowerLaw, 1e-3)
}

/// Gaussian density over a slightly sloped nutrient on an `n x n` unit square.
pub fn state(n: usize) -> SimState {
    let g = Grid::unit_square(n).expect("valid grid");
    let u = ScalarField::from_fn(g, |x, y| {
        0.1 + (-((x - 0.35f64).powi(2) + (y - 0.4f64).powi(2)) / 0.045).exp()
    });
    let v = ScalarField::from_fn(g, |x, y| 0.5 + 0.25 * x + 0.2 * y * y);
    SimState::new(u, v)
}
