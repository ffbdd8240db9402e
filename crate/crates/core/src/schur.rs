//! The `Λ` matrix of a martingale tree and its two extremal norms.
//!
//! For a symmetric matrix with zero row sums,
//!
//! * `norm2(Λ) = sup_{|α|,|β| <= 1} |αᵀΛβ| = max_{α ∈ {±1}^n} ‖Λα‖₁`,
//! * `norm1(Λ) = sup |αᵀΛα|` over `|α_I| <= 1/4`, `Σ α_I = 0`.
//!
//! `norm2` is exact up to the brute-force cap.  `norm1` is maximized over a
//! nonconvex problem and only lower bounds are returned.  Polarization of the
//! `norm2` maximizer gives feasible points with `norm2 <= 128 · norm1_lower`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bellman::MartingaleTree;
use crate::dyadic::DyadicInterval;
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Scalar;
use crate::signal::dot;

/// Default upper bound for the real Grothendieck constant.
pub const KG_DEFAULT: f64 = 1.783;

/// Largest `n` for which `norm2` is computed by exhaustive search.
pub const BRUTE_FORCE_CAP: usize = 16;

/// Symmetric `2^k × 2^k` matrix with zero row and column sums.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaMatrix<T: Scalar> {
    k: u32,
    entries: DMatrix<T>,
}

impl<T: Scalar> LambdaMatrix<T> {
    /// Validates symmetry and zero row sums (exactly for exact scalars).
    pub fn new(k: u32, entries: DMatrix<T>) -> Result<Self> {
        let n = 1usize << k;
        if k == 0 || entries.nrows() != n || entries.ncols() != n {
            return Err(Error::NotAdmissible(format!(
                "expected a {n}x{n} matrix with k >= 1, found {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let scale = entries.iter().map(|v| v.abs().to_f64()).fold(0.0, f64::max);
        for r in 0..n {
            for c in 0..r {
                let diff = entries[(r, c)].clone() - entries[(c, r)].clone();
                if !diff.is_negligible(scale) {
                    return Err(Error::NotAdmissible(format!("asymmetric at ({r}, {c})")));
                }
            }
            let mut sum = T::zero();
            for c in 0..n {
                sum += entries[(r, c)].clone();
            }
            if !sum.is_negligible(scale * n as f64) {
                return Err(Error::NotAdmissible(format!("row {r} does not sum to zero")));
            }
        }
        Ok(Self { k, entries })
    }

    /// `λ_{KL} = ⟨u_K, v_L⟩ + ⟨u_L, v_K⟩` with `u_K = (f_K - f_{I₀})/2^k`
    /// and `v_L = (g_L - g_{I₀})/2^k` over `K, L ∈ 𝒟_k(I₀)`.
    pub fn from_tree(tree: &MartingaleTree<T>, k: u32) -> Result<Self> {
        if k == 0 || k > tree.depth() {
            return Err(Error::DepthExhausted {
                generation: 0,
                requested: k,
                depth: tree.depth(),
            });
        }
        let root = tree.point(DyadicInterval::ROOT);
        let scale = T::pow2(-(k as i32));
        let centred = |v: &[T], base: &[T]| -> Vec<T> {
            v.iter()
                .zip(base)
                .map(|(a, b)| (a.clone() - b.clone()) * scale.clone())
                .collect()
        };
        let (u, v): (Vec<_>, Vec<_>) = (0..1u64 << k)
            .map(|i| {
                let p = tree.point(DyadicInterval::new(k, i));
                (centred(&p.f, &root.f), centred(&p.g, &root.g))
            })
            .unzip();
        Ok(Self::from_vectors(k, &u, &v))
    }

    pub(crate) fn from_vectors(k: u32, u: &[Vec<T>], v: &[Vec<T>]) -> Self {
        let n = u.len();
        let entries = DMatrix::from_fn(n, n, |r, c| dot(&u[r], &v[c]) + dot(&u[c], &v[r]));
        Self { k, entries }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<T> {
        &self.entries
    }

    /// Every row and column sum vanishes (exactly for exact scalars).
    pub fn zero_line_sums(&self) -> bool {
        let n = self.size();
        let scale = self.sum_abs();
        (0..n).all(|r| {
            let mut row = T::zero();
            let mut col = T::zero();
            for c in 0..n {
                row += self.entries[(r, c)].clone();
                col += self.entries[(c, r)].clone();
            }
            row.is_negligible(scale) && col.is_negligible(scale)
        })
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|v| v.is_zero())
    }

    /// `Σ_{K,L} |λ_{KL}|`.
    pub fn sum_abs(&self) -> f64 {
        self.entries.iter().map(|v| v.abs().to_f64()).sum()
    }

    /// `αᵀΛα` in the scalar type.
    pub fn quadratic(&self, alpha: &[T]) -> T {
        let n = self.size();
        let mut acc = T::zero();
        for r in 0..n {
            for c in 0..n {
                acc += alpha[r].clone() * alpha[c].clone() * self.entries[(r, c)].clone();
            }
        }
        acc
    }

    pub fn to_f64(&self) -> LambdaMatrix<f64> {
        LambdaMatrix {
            k: self.k,
            entries: self.entries.map(|v| v.to_f64()),
        }
    }
}

impl LambdaMatrix<f64> {
    /// Centred Gaussian symmetric matrix `P B P` with `P = I - 11ᵀ/n`.
    pub fn random_admissible(k: u32, rng: &mut Rng) -> Self {
        let n = 1usize << k;
        let mut b = DMatrix::<f64>::zeros(n, n);
        for r in 0..n {
            for c in 0..=r {
                let v: f64 = rng.sample(StandardNormal);
                b[(r, c)] = v;
                b[(c, r)] = v;
            }
        }
        let p = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let mut entries = &p * b * &p;
        // Remove rounding drift so that the row sums are zero to machine precision.
        for r in 0..n {
            let mean = entries.row(r).sum() / n as f64;
            for c in 0..n {
                entries[(r, c)] -= mean;
            }
        }
        entries = (&entries + entries.transpose()) * 0.5;
        Self { k, entries }
    }

    /// `Λ` of random level-`k` martingale values `f_K, g_K ∈ [-1, 1]^d`.
    pub fn random_lemma_form(k: u32, d: usize, rng: &mut Rng) -> Self {
        let n = 1usize << k;
        let draw = |rng: &mut Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
                .collect()
        };
        let (f, g) = (draw(rng), draw(rng));
        let centre = |x: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mean: Vec<f64> = (0..d).map(|c| x.iter().map(|v| v[c]).sum::<f64>() / n as f64).collect();
            x.iter()
                .map(|v| v.iter().zip(&mean).map(|(a, m)| (a - m) / n as f64).collect())
                .collect()
        };
        Self::from_vectors(k, &centre(&f), &centre(&g))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.entries, out)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let m = read_matrix_csv(input)?;
        let n = m.nrows();
        if !n.is_power_of_two() {
            return Err(Error::NotAdmissible(format!("size {n} is not a power of two")));
        }
        Self::new(n.trailing_zeros(), m)
    }
}

/// Maximizer of `norm2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm2Result {
    pub value: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `true` when found by exhaustive search; otherwise a lower bound.
    pub exact: bool,
}

/// `max_{α ∈ {±1}^n} ‖Λα‖₁`; exhaustive (Gray code) up to
/// [`BRUTE_FORCE_CAP`], local search with 64 restarts above.
pub fn norm2(lambda: &LambdaMatrix<f64>) -> Norm2Result {
    norm2_with(lambda, BRUTE_FORCE_CAP, 64, 0)
}

pub fn norm2_with(lambda: &LambdaMatrix<f64>, cap: usize, restarts: usize, seed: u64) -> Norm2Result {
    let a = &lambda.entries;
    let n = a.nrows();
    if n <= cap {
        norm2_brute_force(a)
    } else {
        norm2_local_search(a, restarts, seed)
    }
}

fn l1_and_signs(y: &[f64]) -> (f64, Vec<f64>) {
    let l1 = y.iter().map(|v| v.abs()).sum();
    let s = y.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    (l1, s)
}

fn norm2_brute_force(a: &DMatrix<f64>) -> Norm2Result {
    let n = a.nrows();
    // α and -α give the same value, so fix α_{n-1} = +1.
    let mut alpha = vec![1.0; n];
    let mut y: Vec<f64> = (0..n).map(|r| a.row(r).sum()).collect();
    let mut best = l1_and_signs(&y).0;
    let mut best_alpha = alpha.clone();
    let free = n.saturating_sub(1);
    for step in 1u64..(1u64 << free) {
        let bit = step.trailing_zeros() as usize;
        alpha[bit] = -alpha[bit];
        let delta = 2.0 * alpha[bit];
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += delta * a[(r, bit)];
        }
        let v: f64 = y.iter().map(|v| v.abs()).sum();
        if v > best {
            best = v;
            best_alpha.clone_from(&alpha);
        }
    }
    let y: Vec<f64> = (a * nalgebra::DVector::from_column_slice(&best_alpha))
        .iter()
        .copied()
        .collect();
    let (value, beta) = l1_and_signs(&y);
    Norm2Result {
        value: value.max(best),
        alpha: best_alpha,
        beta,
        exact: true,
    }
}

fn norm2_local_search(a: &DMatrix<f64>, restarts: usize, seed: u64) -> Norm2Result {
    let n = a.nrows();
    let mut rng = rng_from_seed(seed);
    let mut best = Norm2Result {
        value: -1.0,
        alpha: vec![1.0; n],
        beta: vec![1.0; n],
        exact: false,
    };
    for _ in 0..restarts.max(1) {
        let mut alpha: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut value = f64::NEG_INFINITY;
        loop {
            let y = a * nalgebra::DVector::from_column_slice(&alpha);
            let (v, beta) = l1_and_signs(y.as_slice());
            if v <= value + 1e-15 * v.abs() {
                break;
            }
            value = v;
            let z = a.transpose() * nalgebra::DVector::from_column_slice(&beta);
            let next = l1_and_signs(z.as_slice()).1;
            if v > best.value {
                best = Norm2Result {
                    value: v,
                    alpha: alpha.clone(),
                    beta,
                    exact: false,
                };
            }
            alpha = next;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm1Method {
    BalancedEnumeration,
    ProjectedGradient,
    Polarization,
    Degenerate,
}

/// Best feasible `α` found for `norm1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm1Result {
    /// `|αᵀΛα|` at `alpha`; a lower bound for `norm1`.
    pub value: f64,
    pub alpha: Vec<f64>,
    pub method: Norm1Method,
    /// Best value over balanced `±1/4` vectors, when enumerated.
    pub enumeration_value: Option<f64>,
    /// Best value reached by projected gradient ascent.
    pub gradient_value: f64,
    /// Best value among the polarization points of the `norm2` maximizer.
    pub polarization_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm1Options {
    pub restarts: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Balanced vectors are enumerated when `n` is at most this.
    pub enumerate_cap: usize,
}

impl Default for Norm1Options {
    fn default() -> Self {
        Self {
            restarts: 16,
            iterations: 400,
            seed: 0,
            enumerate_cap: 16,
        }
    }
}

pub fn norm1(lambda: &LambdaMatrix<f64>) -> Norm1Result {
    norm1_with(lambda, &norm2(lambda), &Norm1Options::default())
}

fn quad(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = nalgebra::DVector::from_column_slice(x);
    v.dot(&(a * &v))
}

/// Euclidean projection onto `{|x_i| <= 1/4, Σ x_i = 0}` by bisection on
/// the shift `τ` in `clamp(y - τ)`.
pub fn project_alpha(y: &[f64]) -> Vec<f64> {
    let clamp = |v: f64| v.clamp(-0.25, 0.25);
    let total = |tau: f64| y.iter().map(|&v| clamp(v - tau)).sum::<f64>();
    let (mut lo, mut hi) = (
        y.iter().copied().fold(f64::INFINITY, f64::min) - 0.25,
        y.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.25,
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-17 * (1.0 + lo.abs()) {
            break;
        }
    }
    let tau = 0.5 * (lo + hi);
    let mut x: Vec<f64> = y.iter().map(|&v| clamp(v - tau)).collect();
    // Spread the residual drift over the unsaturated coordinates.
    let drift: f64 = x.iter().sum();
    let free: Vec<usize> = (0..x.len()).filter(|&i| x[i].abs() < 0.25).collect();
    if !free.is_empty() {
        let share = drift / free.len() as f64;
        for i in free {
            x[i] = clamp(x[i] - share);
        }
    }
    x
}

fn ascend(a: &DMatrix<f64>, start: Vec<f64>, sign: f64, iterations: usize, step: f64) -> Vec<f64> {
    let mut x = start;
    let mut value = sign * quad(a, &x);
    for _ in 0..iterations {
        let grad = a * nalgebra::DVector::from_column_slice(&x);
        let y: Vec<f64> = x
            .iter()
            .zip(grad.iter())
            .map(|(xi, gi)| xi + step * sign * 2.0 * gi)
            .collect();
        let next = project_alpha(&y);
        let v = sign * quad(a, &next);
        if v <= value + 1e-15 * value.abs().max(1e-300) {
            if v > value {
                x = next;
            }
            break;
        }
        value = v;
        x = next;
    }
    x
}

/// Polarization points `((u ± v)/2 - mean)/8` of the `norm2` maximizer.
fn polarization_points(witness: &Norm2Result) -> [Vec<f64>; 2] {
    let n = witness.alpha.len() as f64;
    let point = |s: f64| -> Vec<f64> {
        let x: Vec<f64> = witness
            .alpha
            .iter()
            .zip(&witness.beta)
            .map(|(u, v)| 0.5 * (u + s * v))
            .collect();
        let mean = x.iter().sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / 8.0).collect()
    };
    [point(1.0), point(-1.0)]
}

struct Best {
    value: f64,
    alpha: Vec<f64>,
    method: Norm1Method,
}

pub fn norm1_with(lambda: &LambdaMatrix<f64>, witness: &Norm2Result, opts: &Norm1Options) -> Norm1Result {
    let a = &lambda.entries;
    let n = a.nrows();
    let mut best = Best {
        value: 0.0,
        alpha: vec![0.0; n],
        method: Norm1Method::Degenerate,
    };
    let consider = |x: &[f64], m: Norm1Method, best: &mut Best| {
        let v = quad(a, x).abs();
        if v > best.value {
            best.value = v;
            best.alpha.clear();
            best.alpha.extend_from_slice(x);
            best.method = m;
        }
        v
    };

    let mut enumeration_value = None;
    if n <= opts.enumerate_cap && n % 2 == 0 && n < 64 {
        let mut e_best = 0.0f64;
        let mut x = vec![0.0; n];
        for mask in 0u64..(1u64 << n) {
            // Fixing the top bit to + halves the work; α and -α agree.
            if mask.count_ones() as usize != n / 2 || mask >> (n - 1) & 1 == 0 {
                continue;
            }
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = if mask >> i & 1 == 1 { 0.25 } else { -0.25 };
            }
            let v = consider(&x, Norm1Method::BalancedEnumeration, &mut best);
            e_best = e_best.max(v);
        }
        enumeration_value = Some(e_best);
    }

    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut polarization_value = 0.0f64;
    for p in polarization_points(witness) {
        let v = consider(&p, Norm1Method::Polarization, &mut best);
        polarization_value = polarization_value.max(v);
        starts.push(p);
    }
    if best.method == Norm1Method::BalancedEnumeration || best.method == Norm1Method::Polarization {
        starts.push(best.alpha.clone());
    }
    let mut rng = rng_from_seed(opts.seed);
    for _ in 0..opts.restarts {
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-0.25..=0.25)).collect();
        starts.push(project_alpha(&y));
    }

    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut gradient_value = 0.0f64;
    if fro > 0.0 {
        let step = 1.0 / (2.0 * fro);
        for s in &starts {
            for sign in [1.0, -1.0] {
                let x = ascend(a, s.clone(), sign, opts.iterations, step);
                let v = consider(&x, Norm1Method::ProjectedGradient, &mut best);
                gradient_value = gradient_value.max(v);
            }
        }
    }

    Norm1Result {
        value: best.value,
        alpha: best.alpha,
        method: best.method,
        enumeration_value,
        gradient_value,
        polarization_value,
    }
}

/// Result of the search for a sequence `α` extracting `Σ|λ_{KL}|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub alpha: Vec<f64>,
    pub quadratic: f64,
    pub sum_abs_lambda: f64,
    /// `|αᵀΛα| · 2^{k/2} / Σ|λ_{KL}|`, zero for `Λ = 0`.
    pub achieved_c: f64,
    /// `(192 K_G)^{-1}`.
    pub threshold: f64,
    pub degenerate: bool,
    pub passes: bool,
}

pub fn find_alpha(lambda: &LambdaMatrix<f64>, kg: f64) -> AlphaReport {
    let threshold = 1.0 / (192.0 * kg);
    let sum_abs = lambda.sum_abs();
    if lambda.is_zero() {
        return AlphaReport {
            alpha: vec![0.0; lambda.size()],
            quadratic: 0.0,
            sum_abs_lambda: 0.0,
            achieved_c: 0.0,
            threshold,
            degenerate: true,
            passes: true,
        };
    }
    let best = norm1(lambda);
    let achieved_c = best.value * 2f64.powf(lambda.k as f64 / 2.0) / sum_abs;
    AlphaReport {
        alpha: best.alpha,
        quadratic: best.value,
        sum_abs_lambda: sum_abs,
        achieved_c,
        threshold,
        degenerate: false,
        passes: achieved_c >= threshold,
    }
}

/// Entrywise product `S_A(M) = (a_{ij} m_{ij})`.
pub fn schur_product(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != m.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: m.len(),
        });
    }
    Ok(a.component_mul(m))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierReport {
    /// `max ‖S_A(M)‖ / ‖M‖` over all candidates.
    pub lower: f64,
    pub best_candidate: String,
    pub candidates: usize,
}

/// Sylvester Hadamard matrix of size `n` (a power of two).
pub fn hadamard(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |r, c| if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
}

/// Lower bound for the Schur multiplier norm of `A` against the spectral
/// norm: Gaussian test matrices plus rank-one sign, cosine, sine, Hadamard,
/// identity and `A`-pattern candidates.
pub fn multiplier_norm_lower(a: &DMatrix<f64>, trials: usize, seed: u64) -> MultiplierReport {
    let (r, c) = a.shape();
    let mut rng = rng_from_seed(seed);
    let mut candidates: Vec<(String, DMatrix<f64>)> = Vec::new();
    for t in 0..trials.max(1) {
        candidates.push((
            format!("gaussian#{t}"),
            DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal)),
        ));
        let s: Vec<f64> = (0..r).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let u: Vec<f64> = (0..c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        candidates.push((format!("rank_one#{t}"), DMatrix::from_fn(r, c, |i, j| s[i] * u[j])));
    }
    let w = std::f64::consts::TAU / r.max(c) as f64;
    candidates.push((
        "cosine".into(),
        DMatrix::from_fn(r, c, |i, j| (w * (i * j) as f64).cos()),
    ));
    candidates.push(("sine".into(), DMatrix::from_fn(r, c, |i, j| (w * (i * j) as f64).sin())));
    if r == c && r.is_power_of_two() {
        candidates.push(("hadamard".into(), hadamard(r)));
    }
    candidates.push(("identity".into(), DMatrix::identity(r, c)));
    candidates.push(("pattern".into(), a.clone()));
    candidates.push(("ones".into(), DMatrix::from_element(r, c, 1.0)));

    let mut best = (0.0, String::from("none"));
    let count = candidates.len();
    for (name, m) in candidates {
        let denom = spectral_norm(&m);
        if denom <= 0.0 {
            continue;
        }
        let ratio = spectral_norm(&a.component_mul(&m)) / denom;
        if ratio > best.0 {
            best = (ratio, name);
        }
    }
    MultiplierReport {
        lower: best.0,
        best_candidate: best.1,
        candidates: count,
    }
}

/// Uniform random `±1` matrix.
pub fn random_sign_matrix(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// Headerless CSV, one matrix row per line.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Serialization(format!("bad matrix entry {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Serialization("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::{BellmanPoint, MartingaleTree};
    use crate::rng::trial_rng;
    use crate::scalar::Exact;
    use crate::signal::SpaceSpec;

    fn basic() -> LambdaMatrix<f64> {
        LambdaMatrix::new(1, DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5])).unwrap()
    }

    #[test]
    fn k1_hand_example() {
        let ex = Exact::from_i64;
        let leaves = vec![
            BellmanPoint::new(vec![ex(3)], ex(9), vec![ex(2)], ex(4)),
            BellmanPoint::new(vec![ex(1)], ex(1), vec![ex(0)], ex(0)),
        ];
        let tree = MartingaleTree::from_leaves(SpaceSpec::scalar(2.0).unwrap(), leaves).unwrap();
        let lam = LambdaMatrix::from_tree(&tree, 1).unwrap();
        let half = Exact::rational(1, 2);
        assert_eq!(lam.entries()[(0, 0)], half);
        assert_eq!(lam.entries()[(0, 1)], -half.clone());
        assert_eq!(lam.entries()[(1, 1)], half);
        assert!(lam.zero_line_sums());
        // Direct-summation oracle of the defining formula.
        let (f, g, f0, g0) = ([3.0, 1.0], [2.0, 0.0], 2.0, 1.0);
        for r in 0..2 {
            for c in 0..2 {
                let want = (f[r] - f0) / 2.0 * (g[c] - g0) / 2.0 + (f[c] - f0) / 2.0 * (g[r] - g0) / 2.0;
                assert_eq!(lam.to_f64().entries()[(r, c)], want);
            }
        }
    }

    #[test]
    fn admissibility_is_checked() {
        assert!(LambdaMatrix::new(1, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).is_err());
        assert!(LambdaMatrix::new(1, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).is_err());
        let mut rng = rng_from_seed(1);
        for k in 1..=4 {
            let l = LambdaMatrix::random_admissible(k, &mut rng);
            assert!(LambdaMatrix::new(k, l.entries().clone()).is_ok());
            let l = LambdaMatrix::random_lemma_form(k, 2, &mut rng);
            assert!(LambdaMatrix::new(k, l.entries().clone()).is_ok());
        }
    }

    #[test]
    fn norms_of_basic_example() {
        let l = basic();
        let n2 = norm2(&l);
        assert_eq!(n2.value, 2.0);
        assert!(n2.exact);
        let n1 = norm1(&l);
        assert!((n1.value - 0.125).abs() < 1e-15);
        assert_eq!(n1.alpha.iter().map(|a| a.abs()).collect::<Vec<_>>(), vec![0.25, 0.25]);
        let fa = find_alpha(&l, KG_DEFAULT);
        assert!((fa.achieved_c - 0.125 * 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(fa.passes);
    }

    #[test]
    fn zero_matrix() {
        let z = LambdaMatrix::new(2, DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(norm2(&z).value, 0.0);
        assert_eq!(norm1(&z).value, 0.0);
        let fa = find_alpha(&z, KG_DEFAULT);
        assert!(fa.degenerate);
        assert_eq!(fa.achieved_c, 0.0);
        assert_eq!(fa.alpha, vec![0.0; 4]);
    }

    #[test]
    fn norm2_matches_grid_search() {
        // Independent maximizer: the bilinear form over a grid containing
        // the vertices of both boxes.
        let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for t in 0..10 {
            let mut rng = trial_rng(40, t);
            let l = LambdaMatrix::random_admissible(2, &mut rng);
            let a = l.entries();
            let mut best = 0.0f64;
            let mut idx = [0usize; 4];
            for code in 0..625 {
                let mut c = code;
                for slot in idx.iter_mut() {
                    *slot = c % 5;
                    c /= 5;
                }
                let alpha: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
                let y = a * nalgebra::DVector::from_column_slice(&alpha);
                for bcode in 0..625 {
                    let mut c = bcode;
                    let mut v = 0.0;
                    for yi in y.iter() {
                        v += grid[c % 5] * yi;
                        c /= 5;
                    }
                    best = best.max(v.abs());
                }
            }
            assert!((norm2(&l).value - best).abs() < 1e-9);
            assert!((norm2_with(&l, 0, 64, 3).value - best).abs() < 1e-9);
        }
    }

    #[test]
    fn enumeration_never_beats_gradient_plus_seeds() {
        for t in 0..20 {
            let mut rng = trial_rng(41, t);
            let l = LambdaMatrix::random_admissible(2, &mut rng);
            let r = norm1(&l);
            let e = r.enumeration_value.unwrap();
            assert!(e <= r.gradient_value + 1e-12, "{e} > {}", r.gradient_value);
            assert!(16.0 * r.value <= norm2(&l).value + 1e-12);
            assert!(norm2(&l).value <= 128.0 * r.value * (1.0 + 1e-12));
            let s: f64 = r.alpha.iter().sum();
            assert!(s.abs() < 1e-12 && r.alpha.iter().all(|a| a.abs() <= 0.25));
        }
    }

    #[test]
    fn projection_is_feasible_and_idempotent() {
        let mut rng = rng_from_seed(5);
        for _ in 0..200 {
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = project_alpha(&y);
            assert!(x.iter().sum::<f64>().abs() < 1e-15);
            assert!(x.iter().all(|v| v.abs() <= 0.25));
            let again = project_alpha(&x);
            assert!(x.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn schur_product_examples() {
        let mut rng = rng_from_seed(2);
        let m = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(schur_product(&DMatrix::from_element(5, 5, 1.0), &m).unwrap(), m);
        assert_eq!(schur_product(&DMatrix::zeros(5, 5), &m).unwrap(), DMatrix::zeros(5, 5));
        let s: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = DMatrix::from_fn(5, 5, |i, j| s[i] * t[j]);
        let lhs = schur_product(&a, &m).unwrap();
        let rhs = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s))
            * &m
            * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(t));
        assert!((lhs - rhs).amax() < 1e-15);
        assert!(schur_product(&DMatrix::zeros(2, 3), &m).is_err());
    }

    #[test]
    fn multiplier_bounds() {
        let ones = multiplier_norm_lower(&DMatrix::from_element(8, 8, 1.0), 4, 1);
        assert_eq!(ones.lower, 1.0);
        let mut rng = rng_from_seed(3);
        let s: Vec<f64> = (0..8)
            .map(|i| if i == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let t: Vec<f64> = (0..8)
            .map(|i| if i == 3 { -1.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let a = DMatrix::from_fn(8, 8, |i, j| s[i] * t[j]);
        assert!(multiplier_norm_lower(&a, 10, 2).lower <= 1.0 + 1e-12);
        for k in 1..=3u32 {
            let n = 1usize << k;
            let m = random_sign_matrix(n, &mut rng);
            let r = multiplier_norm_lower(&m, 10, k as u64);
            assert!(r.lower <= 2f64.powf(k as f64 / 2.0) + 1e-9);
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = rng_from_seed(9);
        let l = LambdaMatrix::random_admissible(2, &mut rng);
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let back = LambdaMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, l);
    }
}
