//! Shared fixtures for the benchmarks.

use umdlab::rng::trial_rng;
use umdlab::schur::LambdaMatrix;
use umdlab::shift::ShiftSpec;
use umdlab::{DyadicSystem, StepFunction};

/// Standard window of the given depth on `[0, 1)`.
pub fn system(depth: u32) -> DyadicSystem {
    DyadicSystem::standard(0, depth).expect("standard window")
}

/// Uniform random scalar step function.
pub fn random_function(depth: u32, seed: u64) -> StepFunction<f64> {
    StepFunction::random_uniform(system(depth), 1, &mut trial_rng(seed, 0))
}

/// Random extremal shift with parameters `(m, n)`.
pub fn random_shift(m: u32, n: u32, depth: u32, seed: u64) -> ShiftSpec<f64> {
    ShiftSpec::random_extremal(m, n, &system(depth), &mut trial_rng(seed, 1)).expect("shift fits the window")
}

/// Random admissible λ-matrix of level `k`.
pub fn random_lambda(k: u32, seed: u64) -> LambdaMatrix<f64> {
    LambdaMatrix::random_admissible(k, &mut trial_rng(seed, 2))
}
