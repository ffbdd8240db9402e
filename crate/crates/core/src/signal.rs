//! Vector-valued step functions on a dyadic window.
//!
//! Values live in `ℝ^d` normed by `ℓ^q`.  A function holds one vector per
//! leaf cell, stored leaf-major.  Averages, Haar coefficients and the
//! weighted `L²` pairing are computed in the scalar type `T`, so with
//! [`Exact`](crate::Exact) every identity between them holds without rounding.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicInterval, DyadicSystem};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Scalar;

/// Exponents of `L^p(ℝ; ℓ^q_d)` and a reference UMD constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub p: f64,
    pub q: f64,
    pub d: usize,
    pub beta_ref: Option<f64>,
}

impl SpaceSpec {
    /// For `d = 1` the reference constant is `max(p, p') - 1`.
    pub fn new(p: f64, q: f64, d: usize) -> Result<Self> {
        for (name, v) in [("p", p), ("q", q)] {
            if !(v > 1.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must lie in (1, inf)")));
            }
        }
        if d == 0 {
            return Err(Error::InvalidParameter("d must be at least 1".into()));
        }
        let beta_ref = (d == 1).then(|| p.max(dual_exponent(p)) - 1.0);
        Ok(Self { p, q, d, beta_ref })
    }

    pub fn scalar(p: f64) -> Result<Self> {
        Self::new(p, 2.0, 1)
    }

    pub fn p_dual(&self) -> f64 {
        dual_exponent(self.p)
    }

    pub fn q_dual(&self) -> f64 {
        dual_exponent(self.q)
    }

    /// `L^{p'}(ℝ; ℓ^{q'}_d)`.
    pub fn dual(&self) -> SpaceSpec {
        SpaceSpec {
            p: self.p_dual(),
            q: self.q_dual(),
            d: self.d,
            beta_ref: self.beta_ref,
        }
    }
}

pub fn dual_exponent(p: f64) -> f64 {
    p / (p - 1.0)
}

/// `ℓ^q` norm of a vector.
pub fn norm_q(v: &[f64], q: f64) -> f64 {
    if q == 2.0 {
        return v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    v.iter().map(|x| x.abs().powf(q)).sum::<f64>().powf(1.0 / q)
}

/// Duality pairing `Σ x_i y_i` between `ℓ^q_d` and `ℓ^{q'}_d`.
pub fn pairing<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(dot(x, y))
}

pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (a, b) in x.iter().zip(y) {
        acc += a.clone() * b.clone();
    }
    acc
}

/// Piecewise-constant `ℝ^d`-valued function on the leaves of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction<T> {
    system: DyadicSystem,
    d: usize,
    values: Vec<T>,
}

impl<T: Scalar> StepFunction<T> {
    /// `values` is leaf-major: `values[leaf * d + component]`.
    pub fn new(system: DyadicSystem, d: usize, values: Vec<T>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("d must be at least 1".into()));
        }
        let expected = system.leaf_count() * d;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self { system, d, values })
    }

    pub fn from_rows(system: DyadicSystem, rows: Vec<Vec<T>>) -> Result<Self> {
        let d = rows.first().map_or(1, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        Self::new(system, d, rows.into_iter().flatten().collect())
    }

    /// Scalar function from leaf values.
    pub fn scalar(system: DyadicSystem, values: Vec<T>) -> Result<Self> {
        Self::new(system, 1, values)
    }

    pub fn zeros(system: DyadicSystem, d: usize) -> Self {
        let n = system.leaf_count() * d;
        Self {
            system,
            d,
            values: vec![T::zero(); n],
        }
    }

    pub fn constant(system: DyadicSystem, c: &[T]) -> Self {
        let values = (0..system.leaf_count()).flat_map(|_| c.iter().cloned()).collect();
        Self {
            system,
            d: c.len(),
            values,
        }
    }

    /// The scalar Haar function `h_I = |I|^{-1/2}(χ_{I^+} - χ_{I^-})`.
    pub fn haar(system: DyadicSystem, interval: DyadicInterval) -> Result<Self> {
        let (left, right) = system.children(interval)?;
        let amp = T::sqrt2_pow(-system.log_length(interval));
        let mut f = Self::zeros(system, 1);
        for i in f.system.leaf_range(left) {
            f.values[i] = amp.clone();
        }
        for i in f.system.leaf_range(right) {
            f.values[i] = -amp.clone();
        }
        Ok(f)
    }

    /// Indicator `χ_I` (scalar).
    pub fn indicator(system: DyadicSystem, interval: DyadicInterval) -> Result<Self> {
        system.check(interval)?;
        let mut f = Self::zeros(system, 1);
        for i in f.system.leaf_range(interval) {
            f.values[i] = T::one();
        }
        Ok(f)
    }

    /// Integer leaf values drawn uniformly from `[-bound, bound]`.
    pub fn random_integer(system: DyadicSystem, d: usize, bound: i64, rng: &mut Rng) -> Self {
        let n = system.leaf_count() * d;
        let values = (0..n).map(|_| T::from_i64(rng.random_range(-bound..=bound))).collect();
        Self { system, d, values }
    }

    pub fn system(&self) -> &DyadicSystem {
        &self.system
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn leaf(&self, i: usize) -> &[T] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn leaf_count(&self) -> usize {
        self.system.leaf_count()
    }

    /// Leaf width `2^{M-D}`.
    pub fn cell_width(&self) -> T {
        T::pow2(self.system.log_len() - self.system.depth() as i32)
    }

    pub fn compatible(&self, other: &StepFunction<T>) -> Result<()> {
        if self.system != other.system {
            return Err(Error::WindowMismatch);
        }
        if self.d != other.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: other.d,
            });
        }
        Ok(())
    }

    /// `⟨f⟩_I`.
    pub fn average(&self, interval: DyadicInterval) -> Result<Vec<T>> {
        self.system.check(interval)?;
        let range = self.system.leaf_range(interval);
        let scale = T::pow2(-((self.system.depth() - interval.generation) as i32));
        let mut acc = vec![T::zero(); self.d];
        for i in range {
            for (a, v) in acc.iter_mut().zip(self.leaf(i)) {
                *a += v.clone();
            }
        }
        Ok(acc.into_iter().map(|a| a * scale.clone()).collect())
    }

    /// Averages over every interval of the window, computed bottom-up.
    pub fn averages(&self) -> Averages<T> {
        Averages::of(self)
    }

    /// `⟨f, h_I⟩ = (|I|^{1/2}/2)(⟨f⟩_{I^+} - ⟨f⟩_{I^-})`.
    pub fn haar_coeff(&self, interval: DyadicInterval) -> Result<Vec<T>> {
        let (left, right) = self.system.children(interval)?;
        let a = self.average(left)?;
        let b = self.average(right)?;
        let scale = T::sqrt2_pow(self.system.log_length(interval)) * T::pow2(-1);
        Ok(a.into_iter().zip(b).map(|(x, y)| (x - y) * scale.clone()).collect())
    }

    pub fn expansion(&self) -> HaarExpansion<T> {
        HaarExpansion::of(self)
    }

    /// `(∫ ‖f‖_q^p)^{1/p}`, evaluated in `f64`.
    pub fn lp_norm(&self, space: &SpaceSpec) -> f64 {
        let w = self.cell_width().to_f64();
        let mut row: Vec<f64> = Vec::with_capacity(self.d);
        let mut acc = 0.0;
        for i in 0..self.leaf_count() {
            row.clear();
            row.extend(self.leaf(i).iter().map(Scalar::to_f64));
            acc += w * norm_q(&row, space.q).powf(space.p);
        }
        acc.powf(1.0 / space.p)
    }

    /// `∫ |f|²` in the scalar type; exact in rational mode.
    pub fn l2_norm_sq(&self) -> T {
        dot(&self.values, &self.values) * self.cell_width()
    }

    /// Weighted pairing `∫ ⟨f, g⟩`.
    pub fn inner(&self, other: &StepFunction<T>) -> Result<T> {
        self.compatible(other)?;
        Ok(dot(&self.values, &other.values) * self.cell_width())
    }

    pub fn add(&self, other: &StepFunction<T>) -> Result<Self> {
        self.compatible(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &StepFunction<T>) -> Result<Self> {
        self.compatible(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, c: &T) -> Self {
        self.map(|v| v * c.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            system: self.system.clone(),
            d: self.d,
            values: self.values.iter().cloned().map(f).collect(),
        }
    }

    fn zip_map(&self, other: &StepFunction<T>, f: impl Fn(T, T) -> T) -> Self {
        Self {
            system: self.system.clone(),
            d: self.d,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(a.clone(), b.clone()))
                .collect(),
        }
    }

    /// Pointwise product `φ·f` with a scalar function `φ`.
    pub fn times_scalar(&self, phi: &StepFunction<T>) -> Result<Self> {
        if phi.system != self.system {
            return Err(Error::WindowMismatch);
        }
        if phi.d != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: phi.d,
            });
        }
        let d = self.d;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v.clone() * phi.values[i / d].clone())
            .collect();
        Ok(Self {
            system: self.system.clone(),
            d,
            values,
        })
    }

    /// Component-wise conversion to `f64`.
    pub fn to_f64(&self) -> StepFunction<f64> {
        StepFunction {
            system: self.system.clone(),
            d: self.d,
            values: self.values.iter().map(Scalar::to_f64).collect(),
        }
    }
}

impl StepFunction<f64> {
    /// Samples a scalar function at cell midpoints.
    pub fn sample(system: DyadicSystem, f: impl Fn(f64) -> f64) -> Self {
        let w = system.leaf_width();
        let x0 = system.origin();
        let values = (0..system.leaf_count()).map(|i| f(x0 + (i as f64 + 0.5) * w)).collect();
        Self { system, d: 1, values }
    }

    /// Leaf values uniform in `[-1, 1]`.
    pub fn random_uniform(system: DyadicSystem, d: usize, rng: &mut Rng) -> Self {
        let n = system.leaf_count() * d;
        let values = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { system, d, values }
    }

    pub fn max_abs_diff(&self, other: &StepFunction<f64>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
struct StepRecord<T> {
    system: DyadicSystem,
    depth: u32,
    d: usize,
    values: Vec<Vec<T>>,
}

impl<T: Scalar + Serialize> Serialize for StepFunction<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StepRecord {
            system: self.system.clone(),
            depth: self.system.depth(),
            d: self.d,
            values: self.values.chunks(self.d).map(<[T]>::to_vec).collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for StepFunction<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = StepRecord::<T>::deserialize(d)?;
        if rec.depth != rec.system.depth() {
            return Err(D::Error::custom("depth disagrees with system"));
        }
        if rec.values.iter().any(|r| r.len() != rec.d) {
            return Err(D::Error::custom("value row of wrong dimension"));
        }
        StepFunction::new(rec.system, rec.d, rec.values.into_iter().flatten().collect()).map_err(D::Error::custom)
    }
}

/// Averages of a step function over every interval of its window, in heap
/// order.
#[derive(Clone, Debug)]
pub struct Averages<T> {
    d: usize,
    data: Vec<T>,
}

impl<T: Scalar> Averages<T> {
    fn of(f: &StepFunction<T>) -> Self {
        let d = f.d;
        let depth = f.system.depth();
        let nodes = (1usize << (depth + 1)) - 1;
        let mut data = vec![T::zero(); nodes * d];
        let first_leaf = (1usize << depth) - 1;
        data[first_leaf * d..].clone_from_slice(&f.values);
        let half = T::pow2(-1);
        for h in (0..first_leaf).rev() {
            let (l, r) = (2 * h + 1, 2 * h + 2);
            for c in 0..d {
                data[h * d + c] = (data[l * d + c].clone() + data[r * d + c].clone()) * half.clone();
            }
        }
        Self { d, data }
    }

    pub fn get(&self, interval: DyadicInterval) -> &[T] {
        let h = interval.heap_index();
        &self.data[h * self.d..(h + 1) * self.d]
    }

    /// `⟨f⟩_{I^+} - ⟨f⟩_{I^-}`.
    pub fn difference(&self, interval: DyadicInterval) -> Vec<T> {
        let a = self.get(interval.left());
        let b = self.get(interval.right());
        a.iter().zip(b).map(|(x, y)| x.clone() - y.clone()).collect()
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

/// Window mean plus the Haar coefficients of every non-leaf interval.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarExpansion<T> {
    system: DyadicSystem,
    d: usize,
    mean: Vec<T>,
    coeffs: Vec<T>,
}

impl<T: Scalar> HaarExpansion<T> {
    fn of(f: &StepFunction<T>) -> Self {
        let avg = f.averages();
        let d = f.d;
        let sys = &f.system;
        let mut coeffs = Vec::with_capacity(sys.non_leaf_count() * d);
        for interval in sys.non_leaf_intervals() {
            let scale = T::sqrt2_pow(sys.log_length(interval)) * T::pow2(-1);
            coeffs.extend(avg.difference(interval).into_iter().map(|v| v * scale.clone()));
        }
        Self {
            system: sys.clone(),
            d,
            mean: avg.get(DyadicInterval::ROOT).to_vec(),
            coeffs,
        }
    }

    /// Expansion with all coefficients zero.
    pub fn zero(system: DyadicSystem, d: usize) -> Self {
        let n = system.non_leaf_count() * d;
        Self {
            system,
            d,
            mean: vec![T::zero(); d],
            coeffs: vec![T::zero(); n],
        }
    }

    pub fn from_map(system: DyadicSystem, mean: Vec<T>, coeffs: &BTreeMap<DyadicInterval, Vec<T>>) -> Result<Self> {
        let d = mean.len();
        let mut flat = Vec::with_capacity(system.non_leaf_count() * d);
        for interval in system.non_leaf_intervals() {
            let c = coeffs.get(&interval).ok_or_else(|| {
                Error::CoefficientMap(format!(
                    "missing coefficient for interval ({}, {})",
                    interval.generation, interval.index
                ))
            })?;
            if c.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: c.len(),
                });
            }
            flat.extend(c.iter().cloned());
        }
        if coeffs.len() != system.non_leaf_count() {
            let extra = coeffs
                .keys()
                .find(|i| i.generation >= system.depth() || i.index >= 1 << i.generation)
                .copied()
                .unwrap_or(DyadicInterval::ROOT);
            return Err(Error::CoefficientMap(format!(
                "coefficient for interval ({}, {}) outside the non-leaf tree",
                extra.generation, extra.index
            )));
        }
        Ok(Self {
            system,
            d,
            mean,
            coeffs: flat,
        })
    }

    pub fn system(&self) -> &DyadicSystem {
        &self.system
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn mean_mut(&mut self) -> &mut [T] {
        &mut self.mean
    }

    pub fn coeff(&self, interval: DyadicInterval) -> &[T] {
        let h = interval.heap_index();
        &self.coeffs[h * self.d..(h + 1) * self.d]
    }

    pub fn coeff_mut(&mut self, interval: DyadicInterval) -> &mut [T] {
        let h = interval.heap_index();
        &mut self.coeffs[h * self.d..(h + 1) * self.d]
    }

    pub fn to_map(&self) -> BTreeMap<DyadicInterval, Vec<T>> {
        self.system
            .non_leaf_intervals()
            .map(|i| (i, self.coeff(i).to_vec()))
            .collect()
    }

    /// Step function `mean + Σ_I c_I h_I`, built top-down from
    /// `⟨f⟩_{I^±} = ⟨f⟩_I ± c_I |I|^{-1/2}`.
    pub fn reconstruct(&self) -> StepFunction<T> {
        let d = self.d;
        let depth = self.system.depth();
        let nodes = (1usize << (depth + 1)) - 1;
        let mut avg = vec![T::zero(); nodes * d];
        avg[..d].clone_from_slice(&self.mean);
        for h in 0..self.system.non_leaf_count() {
            let interval = DyadicInterval::from_heap_index(h);
            let amp = T::sqrt2_pow(-self.system.log_length(interval));
            for c in 0..d {
                let step = self.coeffs[h * d + c].clone() * amp.clone();
                let base = avg[h * d + c].clone();
                avg[(2 * h + 1) * d + c] = base.clone() + step.clone();
                avg[(2 * h + 2) * d + c] = base - step;
            }
        }
        let first_leaf = (1usize << depth) - 1;
        StepFunction {
            system: self.system.clone(),
            d,
            values: avg.split_off(first_leaf * d),
        }
    }
}

impl<T: Scalar + Display> HaarExpansion<T> {
    /// CSV table `generation,index,component,value`; the mean is written as
    /// generation `-1`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["generation", "index", "component", "value"])?;
        for (c, v) in self.mean.iter().enumerate() {
            w.write_record(["-1".into(), "0".into(), c.to_string(), v.to_string()])?;
        }
        for interval in self.system.non_leaf_intervals() {
            for (c, v) in self.coeff(interval).iter().enumerate() {
                w.write_record([
                    interval.generation.to_string(),
                    interval.index.to_string(),
                    c.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reconstructs a step function from its window mean and a coefficient map
/// covering exactly the non-leaf intervals.
pub fn haar_reconstruct<T: Scalar>(
    mean: Vec<T>,
    coeffs: &BTreeMap<DyadicInterval, Vec<T>>,
    system: DyadicSystem,
) -> Result<StepFunction<T>> {
    Ok(HaarExpansion::from_map(system, mean, coeffs)?.reconstruct())
}

/// `Σ_I |⟨Δ_I f, Δ_I g⟩|·|I|` and `4 Σ_I |⟨⟨f,h_I⟩, ⟨g,h_I⟩⟩|`.
pub fn umd_factor_four_sides<T: Scalar>(f: &StepFunction<T>, g: &StepFunction<T>) -> Result<(T, T)> {
    f.compatible(g)?;
    let (af, ag) = (f.averages(), g.averages());
    let (ef, eg) = (f.expansion(), g.expansion());
    let sys = f.system();
    let mut lhs = T::zero();
    let mut rhs = T::zero();
    for interval in sys.non_leaf_intervals() {
        let len = T::pow2(sys.log_length(interval));
        lhs += dot(&af.difference(interval), &ag.difference(interval)).abs() * len;
        rhs += dot(ef.coeff(interval), eg.coeff(interval)).abs();
    }
    Ok((lhs, rhs * T::from_i64(4)))
}

/// A kernel on `ℝ × ℝ` off the diagonal with its claimed standard-estimate
/// constants.
pub struct KernelSpec {
    pub evaluate: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub c: f64,
    pub delta: f64,
}

impl std::fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSpec")
            .field("c", &self.c)
            .field("delta", &self.delta)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub samples: usize,
    pub size_violations: usize,
    pub smoothness_violations: usize,
    /// Largest observed left side divided by right side over both estimates.
    pub worst_ratio: f64,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.size_violations == 0 && self.smoothness_violations == 0
    }
}

impl KernelSpec {
    /// `K(x, y) = 1/(x - y)`; the smoothness estimate holds with `C = 4`.
    pub fn hilbert() -> Self {
        Self {
            evaluate: Box::new(|x, y| 1.0 / (x - y)),
            c: 4.0,
            delta: 1.0,
        }
    }

    /// Checks `|K(x,y)| <= C/|x-y|` and
    /// `|K(x,y)-K(x,z)| + |K(y,x)-K(z,x)| <= C|y-z|/|x-y|^{1+δ}` on random
    /// triples with `|x-y| > 2|y-z|`, scale-mixed over several decades.
    pub fn check_standard_estimates(&self, samples: usize, seed: u64) -> KernelReport {
        let mut rng = rng_from_seed(seed);
        let tol = 1e-12;
        let mut report = KernelReport {
            samples,
            size_violations: 0,
            smoothness_violations: 0,
            worst_ratio: 0.0,
        };
        for _ in 0..samples {
            let x: f64 = rng.random_range(-10.0..10.0);
            let r = 10f64.powf(rng.random_range(-3.0..2.0)) * sign(&mut rng);
            let y = x + r;
            let s = r.abs() * rng.random_range(0.0..0.5) * sign(&mut rng);
            let z = y + s;
            if (x - y).abs() <= 2.0 * (y - z).abs() || y == z {
                continue;
            }
            let k = &self.evaluate;
            let size = k(x, y).abs() / (self.c / (x - y).abs());
            let smooth = ((k(x, y) - k(x, z)).abs() + (k(y, x) - k(z, x)).abs())
                / (self.c * (y - z).abs() / (x - y).abs().powf(1.0 + self.delta));
            if size > 1.0 + tol {
                report.size_violations += 1;
            }
            if smooth > 1.0 + tol {
                report.smoothness_violations += 1;
            }
            report.worst_ratio = report.worst_ratio.max(size).max(smooth);
        }
        report
    }
}

fn sign(rng: &mut Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}
