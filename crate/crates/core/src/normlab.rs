//! Operator-norm estimation on discretized `L^p(ℓ^q_d)`, martingale-transform
//! probes of the UMD constant, the `k 2^{k/2}` scaling study for Haar shifts,
//! and averaging of the Petermichl shift over random dyadic systems.
//!
//! Every estimator returns a lower bound.  Vectors are leaf-major with `d`
//! components per cell; the uniform cell weight cancels in all norm ratios
//! and is omitted.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::DyadicSystem;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, trial_rng};
use crate::shift::{operator_matrix, ShiftSpec, SignSequence};
use crate::signal::{norm_q, SpaceSpec, StepFunction};

/// Largest dense operator built by the studies.
pub const DENSE_CAP: usize = 4096;

/// A linear map on flat `f64` vectors together with its transpose.
pub trait LinearOperator: Sync {
    fn rows(&self) -> usize;

    fn cols(&self) -> usize;

    fn apply(&self, x: &[f64]) -> Vec<f64>;

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn rows(&self) -> usize {
        self.nrows()
    }

    fn cols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        (self.tr_mul(&DVector::from_column_slice(y))).as_slice().to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    ExactSpectral,
    BoydIteration,
    RandomProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub lower: f64,
    pub method: NormMethod,
    pub iterations: usize,
    pub certified_upper: Option<f64>,
}

/// `(Σ_c ‖x_c‖_q^p)^{1/p}` over blocks of length `d`.
pub fn mixed_norm(x: &[f64], p: f64, q: f64, d: usize) -> f64 {
    x.chunks(d).map(|c| norm_q(c, q).powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Duality map: the unit vector `z` of the dual mixed norm with
/// `⟨z, y⟩ = ‖y‖_{p,q}`.
pub fn duality_map(y: &[f64], p: f64, q: f64, d: usize) -> Vec<f64> {
    let total = mixed_norm(y, p, q, d);
    if total == 0.0 {
        return vec![0.0; y.len()];
    }
    let scale = total.powf(p - 1.0);
    let mut z = Vec::with_capacity(y.len());
    for c in y.chunks(d) {
        let nb = norm_q(c, q);
        if nb == 0.0 {
            z.extend(std::iter::repeat_n(0.0, c.len()));
            continue;
        }
        let block = nb.powf(p - q) / scale;
        z.extend(c.iter().map(|v| v.signum() * v.abs().powf(q - 1.0) * block));
    }
    z
}

const L2_TOL: f64 = 1e-10;
const L2_MAX_ITER: usize = 100_000;

/// Largest singular value by power iteration on `AᵀA`; the SVD value is
/// reported as the certified upper bound.
pub fn opnorm_l2(matrix: &DMatrix<f64>) -> Result<NormEstimate> {
    let n = matrix.ncols();
    if n == 0 || matrix.nrows() == 0 {
        return Ok(NormEstimate {
            lower: 0.0,
            method: NormMethod::ExactSpectral,
            iterations: 0,
            certified_upper: Some(0.0),
        });
    }
    let mut rng = trial_rng(0x5eed, 0);
    let mut v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    v /= v.norm();
    let mut value = (matrix * &v).norm();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let w = matrix.tr_mul(&(matrix * &v));
        let wn = w.norm();
        if wn == 0.0 {
            value = 0.0;
            break;
        }
        v = w / wn;
        let next = (matrix * &v).norm();
        let done = (next - value).abs() <= L2_TOL * next;
        value = value.max(next);
        if done {
            break;
        }
        if iterations >= L2_MAX_ITER {
            return Err(Error::NonConvergence { iterations });
        }
    }
    let sigma = matrix.singular_values().max();
    // Relative slack for the rounding in the SVD itself.
    let upper = sigma * (1.0 + 1e-12);
    Ok(NormEstimate {
        lower: value.min(upper),
        method: NormMethod::ExactSpectral,
        iterations,
        certified_upper: Some(upper),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoydOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once the relative increase falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for BoydOptions {
    fn default() -> Self {
        Self {
            restarts: 4,
            max_iter: 500,
            tol: 1e-13,
            seed: 0,
        }
    }
}

/// One run of the nonlinear power method.
#[derive(Clone, Debug)]
pub struct BoydRun {
    pub value: f64,
    pub iterations: usize,
    /// Objective after each iteration.
    pub trace: Vec<f64>,
}

/// Tolerance for the monotonicity assertion: roundoff in the norm
/// evaluations only.
const MONOTONE_SLACK: f64 = 1e-10;

/// Nonlinear power method for `‖A‖_{(p,q) → (p,q)}` started at `x0`.
pub fn boyd_run(op: &dyn LinearOperator, x0: &[f64], space: &SpaceSpec, max_iter: usize, tol: f64) -> BoydRun {
    let (p, q, d) = (space.p, space.q, space.d);
    let (pd, qd) = (space.p_dual(), space.q_dual());
    let n0 = mixed_norm(x0, p, q, d);
    let mut trace = Vec::new();
    if n0 == 0.0 {
        return BoydRun {
            value: 0.0,
            iterations: 0,
            trace,
        };
    }
    let mut x: Vec<f64> = x0.iter().map(|v| v / n0).collect();
    let mut best = 0.0f64;
    for it in 0..max_iter {
        let y = op.apply(&x);
        let value = mixed_norm(&y, p, q, d) / mixed_norm(&x, p, q, d);
        if let Some(&prev) = trace.last() {
            assert!(
                value >= prev * (1.0 - MONOTONE_SLACK),
                "nonlinear power iteration decreased: {prev} -> {value} at step {it}"
            );
        }
        trace.push(value);
        let stalled = value <= best * (1.0 + tol);
        best = best.max(value);
        if (it > 0 && stalled) || value == 0.0 {
            break;
        }
        let w = op.apply_transpose(&duality_map(&y, p, q, d));
        if w.iter().all(|v| *v == 0.0) {
            break;
        }
        x = duality_map(&w, pd, qd, d);
    }
    BoydRun {
        value: best,
        iterations: trace.len(),
        trace,
    }
}

/// The transpose view of an operator.
struct Transposed<'a>(&'a dyn LinearOperator);

impl LinearOperator for Transposed<'_> {
    fn rows(&self) -> usize {
        self.0.cols()
    }

    fn cols(&self) -> usize {
        self.0.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.apply_transpose(x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.0.apply(y)
    }
}

fn gaussian_start(n: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = trial_rng(seed, index);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Best ratio found by the nonlinear power method over random restarts.
pub fn opnorm_lp_lower(op: &dyn LinearOperator, space: &SpaceSpec, opts: &BoydOptions) -> NormEstimate {
    let n = op.cols();
    let runs: Vec<BoydRun> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let x0 = gaussian_start(n, opts.seed, r as u64);
            boyd_run(op, &x0, space, opts.max_iter, opts.tol)
        })
        .collect();
    NormEstimate {
        lower: runs.iter().map(|r| r.value).fold(0.0, f64::max),
        method: NormMethod::BoydIteration,
        iterations: runs.iter().map(|r| r.iterations).sum(),
        certified_upper: None,
    }
}

/// Runs the method on `A` at `(p, q)` and on `Aᵀ` at `(p', q')` from the
/// mirrored start `J(A x₀)`; the two objective sequences interleave.
pub fn mirrored_pair(
    op: &dyn LinearOperator,
    space: &SpaceSpec,
    x0: &[f64],
    max_iter: usize,
    tol: f64,
) -> (BoydRun, BoydRun) {
    let primal = boyd_run(op, x0, space, max_iter, tol);
    let z0 = duality_map(&op.apply(x0), space.p, space.q, space.d);
    let dual = boyd_run(&Transposed(op), &z0, &space.dual(), max_iter, tol);
    (primal, dual)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmdProbeReport {
    pub p: f64,
    pub depth: u32,
    pub trials: usize,
    /// Largest Boyd lower bound for `‖T_σ‖_{p→p}` over the sampled `σ`.
    pub value: f64,
    /// Same maximum computed from the mirrored runs on `T_σᵀ` at `p'`.
    pub dual_value: f64,
    /// Largest per-trial `|‖T_σ‖_p - ‖T_σᵀ‖_{p'}|`.
    pub duality_gap: f64,
    pub beta_ref: Option<f64>,
    pub within_reference: Option<bool>,
    pub per_trial: Vec<f64>,
}

/// Restarts per sign sequence in [`umd_probe`].
pub const UMD_RESTARTS: usize = 2;
/// Tolerance on the comparison with `β_ref`.
pub const UMD_TOL: f64 = 1e-6;

/// Lower bound for `sup_σ ‖T_σ‖_{p→p}` from random sign sequences on the
/// standard window of the given depth.
pub fn umd_probe(space: &SpaceSpec, depth: u32, trials: usize, seed: u64) -> Result<UmdProbeReport> {
    let system = DyadicSystem::standard(0, depth)?;
    let results: Vec<Result<(f64, f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            let sigma = SignSequence::random(&system, &mut rng);
            let mat = operator_matrix(&sigma, &system, space.d, DENSE_CAP)?;
            let (mut best, mut best_dual, mut gap) = (0.0f64, 0.0f64, 0.0f64);
            for r in 0..UMD_RESTARTS {
                let x0 = gaussian_start(mat.ncols(), derive_seed(seed, t as u64), r as u64);
                let (a, b) = mirrored_pair(&mat, space, &x0, 2000, 1e-15);
                best = best.max(a.value);
                best_dual = best_dual.max(b.value);
                gap = gap.max((a.value - b.value).abs());
            }
            Ok((best, best_dual, gap))
        })
        .collect();
    let mut per_trial = Vec::with_capacity(trials);
    let (mut value, mut dual_value, mut duality_gap) = (0.0f64, 0.0f64, 0.0f64);
    for r in results {
        let (a, b, g) = r?;
        per_trial.push(a);
        value = value.max(a);
        dual_value = dual_value.max(b);
        duality_gap = duality_gap.max(g);
    }
    Ok(UmdProbeReport {
        p: space.p,
        depth,
        trials,
        value,
        dual_value,
        duality_gap,
        beta_ref: space.beta_ref,
        within_reference: space.beta_ref.map(|b| value <= b + UMD_TOL),
        per_trial,
    })
}

/// One sampled shift in the scaling study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTrial {
    pub k: u32,
    pub p: f64,
    pub trial: usize,
    pub m: u32,
    pub n: u32,
    pub norm_lower: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub k: u32,
    pub p: f64,
    pub num_shifts: usize,
    pub max_norm_lower: f64,
    /// `fitted_c · k 2^{k/2} · β`.
    pub bound_value: f64,
    pub fitted_c: f64,
    /// `max_norm_lower / (k 2^{k/2} β)` for this row alone.
    pub implied_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub depth: u32,
    /// `β_ref`, or 1 when no reference constant exists and raw norms are fitted.
    pub beta: f64,
    pub beta_is_reference: bool,
    pub fitted_c: f64,
    pub rows: Vec<ScalingRow>,
    pub trials: Vec<ScalingTrial>,
}

/// `k 2^{k/2}`.
pub fn growth(k: u32) -> f64 {
    k as f64 * 2f64.powf(k as f64 / 2.0)
}

impl ScalingReport {
    /// `max_k c_k / min_k c_k` over rows with a positive implied constant.
    pub fn implied_spread(&self) -> Option<f64> {
        let cs: Vec<f64> = self.rows.iter().map(|r| r.implied_c).filter(|c| *c > 0.0).collect();
        if cs.is_empty() {
            return None;
        }
        let max = cs.iter().copied().fold(f64::MIN, f64::max);
        let min = cs.iter().copied().fold(f64::MAX, f64::min);
        Some(max / min)
    }

    /// Largest `c_{k'} / c_k` over `k < k'`: growth of the implied constant
    /// with `k`.
    pub fn implied_growth(&self) -> Option<f64> {
        let mut worst: Option<f64> = None;
        for (i, a) in self.rows.iter().enumerate() {
            for b in &self.rows[i + 1..] {
                if a.implied_c > 0.0 {
                    let r = b.implied_c / a.implied_c;
                    worst = Some(worst.map_or(r, |w| w.max(r)));
                }
            }
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for t in &self.trials {
            w.serialize(t)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A random symmetrized extremal shift of complexity `k`: parameters
/// `(k-1, n)` with `n` uniform in `0..k`, in random order.
pub fn scaling_shift(k: u32, system: &DyadicSystem, rng: &mut crate::rng::Rng) -> Result<(u32, u32, ShiftSpec<f64>)> {
    let big = k - 1;
    let small = rng.random_range(0..k);
    let (m, n) = if rng.random::<bool>() {
        (big, small)
    } else {
        (small, big)
    };
    let spec = ShiftSpec::<f64>::random_extremal(m, n, system, rng)?.symmetrize();
    Ok((m, n, spec))
}

pub fn shift_scaling_study(
    k_range: &[u32],
    space: &SpaceSpec,
    shifts_per_k: usize,
    depth: u32,
    seed: u64,
) -> Result<ScalingReport> {
    let max_k = k_range.iter().copied().max().unwrap_or(0);
    if k_range.contains(&0) {
        return Err(Error::InvalidParameter("complexity k must be at least 1".into()));
    }
    if !k_range.is_empty() && depth < max_k + 2 {
        return Err(Error::InvalidParameter(format!(
            "depth {depth} below max k + 2 = {}",
            max_k + 2
        )));
    }
    let system = DyadicSystem::standard(0, depth)?;
    let (beta, beta_is_reference) = match space.beta_ref {
        Some(b) => (b, true),
        None => (1.0, false),
    };
    let mut trials = Vec::new();
    for &k in k_range {
        let batch: Vec<Result<ScalingTrial>> = (0..shifts_per_k)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(derive_seed(seed, k as u64), t as u64);
                let (m, n, spec) = scaling_shift(k, &system, &mut rng)?;
                let mat = operator_matrix(&spec, &system, space.d, DENSE_CAP)?;
                let opts = BoydOptions {
                    seed: derive_seed(seed ^ 0xb0d, (k as u64) << 32 | t as u64),
                    ..BoydOptions::default()
                };
                let est = if space.p == 2.0 && space.q == 2.0 {
                    opnorm_l2(&mat)?
                } else {
                    opnorm_lp_lower(&mat, space, &opts)
                };
                Ok(ScalingTrial {
                    k,
                    p: space.p,
                    trial: t,
                    m,
                    n,
                    norm_lower: est.lower,
                })
            })
            .collect();
        for r in batch {
            trials.push(r?);
        }
    }
    let mut rows: Vec<ScalingRow> = k_range
        .iter()
        .map(|&k| {
            let here: Vec<&ScalingTrial> = trials.iter().filter(|t| t.k == k).collect();
            let max_norm_lower = here.iter().map(|t| t.norm_lower).fold(0.0, f64::max);
            ScalingRow {
                k,
                p: space.p,
                num_shifts: here.len(),
                max_norm_lower,
                bound_value: 0.0,
                fitted_c: 0.0,
                implied_c: max_norm_lower / (growth(k) * beta),
            }
        })
        .collect();
    let fitted_c = rows.iter().map(|r| r.implied_c).fold(0.0, f64::max);
    for r in &mut rows {
        r.fitted_c = fitted_c;
        r.bound_value = fitted_c * growth(r.k) * beta;
    }
    Ok(ScalingReport {
        depth,
        beta,
        beta_is_reference,
        fitted_c,
        rows,
        trials,
    })
}

/// Test functions for [`hilbert_demo`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `exp(-1/(1-u²))`, `u = (x - centre)/radius`, zero for `|u| >= 1`.
    Bump {
        centre: f64,
        radius: f64,
    },
    Constant {
        value: f64,
    },
}

impl TestFunction {
    pub fn standard_bump() -> Self {
        TestFunction::Bump {
            centre: 0.5,
            radius: 0.25,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Bump { centre, radius } => {
                let u = (x - centre) / radius;
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    (-1.0 / (1.0 - u * u)).exp()
                }
            }
            TestFunction::Constant { value } => value,
        }
    }

    /// Interval outside which the function vanishes, if any.
    fn support(&self) -> Option<(f64, f64)> {
        match *self {
            TestFunction::Bump { centre, radius } => Some((centre - radius, centre + radius)),
            TestFunction::Constant { .. } => None,
        }
    }
}

/// Residual after `systems` averaged outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub systems: usize,
    pub fitted_c: f64,
    pub relative_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HilbertReport {
    pub num_systems: usize,
    pub depth: u32,
    pub seed: u64,
    pub test_function: TestFunction,
    pub fitted_c: f64,
    /// `‖avg - c H f‖ / ‖avg‖` on `[0, 1)`; absent for a degenerate fit.
    pub relative_residual: Option<f64>,
    pub degenerate: bool,
    pub curve: Vec<CurvePoint>,
    pub residual_nonincreasing: bool,
    /// Cell values on `[0, 1)`.
    pub averaged: Vec<f64>,
    pub hilbert: Vec<f64>,
}

/// Root level of the sampled systems: roots have length 8.
pub const HILBERT_ROOT_LEVEL: i32 = -3;

/// `(1/π) Σ_{j≠i} f_j w / (x_i - x_j)` over the cells of `[0, 1)`.
pub fn discrete_hilbert(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let w = 1.0 / n as f64;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for (j, fj) in values.iter().enumerate() {
                if j != i {
                    s += fj / ((i as f64 - j as f64) * w);
                }
            }
            s * w / std::f64::consts::PI
        })
        .collect()
}

fn fit_scalar(avg: &[f64], h: &[f64]) -> (f64, Option<f64>) {
    let hh: f64 = h.iter().map(|v| v * v).sum();
    let aa: f64 = avg.iter().map(|v| v * v).sum();
    let scale = h.len() as f64 * 1e-24;
    if hh <= scale || aa <= scale {
        return (0.0, None);
    }
    let c = avg.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / hh;
    let res: f64 = avg.iter().zip(h).map(|(a, b)| (a - c * b).powi(2)).sum();
    (c, Some((res / aa).sqrt()))
}

/// Checkpoints `n/16, n/8, n/4, n/2, n` (those at least 1).
pub fn hilbert_checkpoints(num_systems: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=4).rev().map(|s| num_systems >> s).filter(|&c| c >= 1).collect();
    out.dedup();
    out
}

/// The `s`-th system of the sampling schedule.  On levels `-3..=depth` a
/// system is the standard grid translated by `t = Σ_i ω_i 2^{-i}`, uniform on
/// `2^{-depth} ℤ ∩ [0, 8)`.  The leading digits of `t` come from the
/// bit-reversed index shifted by `rotation`; the digits below them are
/// drawn independently.  Each system is uniformly distributed and every
/// prefix of length `2^m` is stratified over the top `m` digits.
pub fn stratified_system(seed: u64, s: u64, rotation: u64, depth: u32) -> Result<DyadicSystem> {
    let window_depth = depth + (-HILBERT_ROOT_LEVEL) as u32;
    let mask = (1u64 << window_depth) - 1;
    let index = s & mask;
    let lead = 64 - index.leading_zeros();
    let reversed = index.reverse_bits() >> (64 - window_depth);
    let free = window_depth - lead;
    let low = if free == 0 {
        0
    } else {
        trial_rng(seed, s).random_range(0..1u64 << free)
    };
    let t = (reversed + low + rotation) & mask;
    let omega = (0..window_depth)
        .map(|i| t >> (window_depth - 1 - i) & 1 == 1)
        .collect();
    DyadicSystem::with_omega(HILBERT_ROOT_LEVEL, window_depth, -1, omega)
}

/// Averages the Petermichl shift over random systems with roots of length 8
/// and leaves of width `2^{-depth}`, and fits a scalar multiple of the
/// discrete Hilbert transform on `[0, 1)`.
pub fn hilbert_demo(num_systems: usize, depth: u32, test_function: TestFunction, seed: u64) -> Result<HilbertReport> {
    let n = 1usize << depth;
    let window_depth = depth + (-HILBERT_ROOT_LEVEL) as u32;
    let template = DyadicSystem::standard(-HILBERT_ROOT_LEVEL, window_depth)?;
    let petermichl = ShiftSpec::<f64>::petermichl(&template)?;
    let reference: Vec<f64> = (0..n)
        .map(|i| test_function.eval((i as f64 + 0.5) / n as f64))
        .collect();
    let hilbert = discrete_hilbert(&reference);
    let checkpoints = hilbert_checkpoints(num_systems);
    let tile_units = 1i64 << window_depth;

    let rotation = trial_rng(seed, 0).random_range(0..tile_units as u64);
    let mut sum = vec![0.0; n];
    let mut curve = Vec::new();
    let mut done = 0;
    for &stop in &checkpoints {
        let contributions: Vec<Result<Vec<(usize, f64)>>> = (done..stop)
            .into_par_iter()
            .map(|s| {
                let sys = stratified_system(seed, s as u64 + 1, rotation, depth)?;
                let mut out = Vec::new();
                for tile in [sys.clone(), sys.neighbor(1)] {
                    let start = tile.origin_units();
                    let (a, b) = (
                        start as f64 * tile.leaf_width(),
                        (start + tile_units) as f64 * tile.leaf_width(),
                    );
                    if b <= 0.0 || a >= 1.0 {
                        continue;
                    }
                    if let Some((lo, hi)) = test_function.support() {
                        if b <= lo || a >= hi {
                            continue;
                        }
                    }
                    let f = StepFunction::sample(tile.clone(), |x| test_function.eval(x));
                    let sf = petermichl.apply(&f)?;
                    for (i, v) in sf.values().iter().enumerate() {
                        let cell = start + i as i64;
                        if (0..n as i64).contains(&cell) {
                            out.push((cell as usize, *v));
                        }
                    }
                }
                Ok(out)
            })
            .collect();
        for c in contributions {
            for (cell, v) in c? {
                sum[cell] += v;
            }
        }
        done = stop;
        let avg: Vec<f64> = sum.iter().map(|v| v / done as f64).collect();
        let (fitted_c, relative_residual) = fit_scalar(&avg, &hilbert);
        curve.push(CurvePoint {
            systems: done,
            fitted_c,
            relative_residual,
        });
    }
    let averaged: Vec<f64> = if done == 0 {
        vec![0.0; n]
    } else {
        sum.iter().map(|v| v / done as f64).collect()
    };
    let (fitted_c, relative_residual) = fit_scalar(&averaged, &hilbert);
    let residuals: Vec<Option<f64>> = curve.iter().map(|c| c.relative_residual).collect();
    let residual_nonincreasing = residuals.iter().all(Option::is_some) && residuals.windows(2).all(|w| w[1] <= w[0]);
    Ok(HilbertReport {
        num_systems,
        depth,
        seed,
        test_function,
        fitted_c,
        relative_residual,
        degenerate: relative_residual.is_none(),
        curve,
        residual_nonincreasing,
        averaged,
        hilbert,
    })
}
