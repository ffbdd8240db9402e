//! Haar shifts, martingale transforms, paraproducts and slices.
//!
//! A shift of parameters `(m, n)` is stored as a table of coefficients
//! `c^L_{I,J}` keyed by window addresses, with `I ∈ 𝒟_m(L)` and `J ∈ 𝒟_n(L)`.
//! Entries in the transposed block `I ∈ 𝒟_n(L)`, `J ∈ 𝒟_m(L)` are also
//! accepted; they arise when a shift with `m != n` is symmetrized.  Only
//! parents `L` whose Haar descendants are all above the leaf level carry
//! coefficients.  All operators here annihilate constants.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicInterval, DyadicSystem};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{le, Scalar};
use crate::signal::{dot, HaarExpansion, StepFunction};

/// Linear map between step functions on a fixed window shape.
pub trait LeafOperator<T: Scalar> {
    fn apply(&self, f: &StepFunction<T>) -> Result<StepFunction<T>>;
}

/// Address triple `(L, I, J)` of a shift coefficient.
pub type ShiftKey = (DyadicInterval, DyadicInterval, DyadicInterval);

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec<T> {
    m: u32,
    n: u32,
    log_len: i32,
    depth: u32,
    entries: BTreeMap<ShiftKey, T>,
}

/// Generations `g` of parents `L` with `|L| = 2^{j + k t}` and
/// `g + reach < depth`.
pub fn slice_generations(log_len: i32, depth: u32, j: u32, k: u32, reach: u32) -> Vec<u32> {
    (0..depth)
        .filter(|&g| g + reach < depth)
        .filter(|&g| (log_len - g as i32 - j as i32).rem_euclid(k as i32) == 0)
        .collect()
}

impl<T: Scalar> ShiftSpec<T> {
    pub fn new(m: u32, n: u32, system: &DyadicSystem, entries: BTreeMap<ShiftKey, T>) -> Result<Self> {
        let spec = Self {
            m,
            n,
            log_len: system.log_len(),
            depth: system.depth(),
            entries,
        };
        for (key, c) in &spec.entries {
            spec.validate(key, c)?;
        }
        Ok(spec)
    }

    pub fn zero(m: u32, n: u32, system: &DyadicSystem) -> Self {
        Self {
            m,
            n,
            log_len: system.log_len(),
            depth: system.depth(),
            entries: BTreeMap::new(),
        }
    }

    /// `2^{-(m+n)/2}`.
    pub fn bound(&self) -> T {
        T::sqrt2_pow(-((self.m + self.n) as i32))
    }

    fn validate(&self, &(l, i, j): &ShiftKey, c: &T) -> Result<()> {
        let describe = |msg: &str| {
            Error::ShiftEntry(format!(
                "{msg}: L=({}, {}), I=({}, {}), J=({}, {})",
                l.generation, l.index, i.generation, i.index, j.generation, j.index
            ))
        };
        if !l.contains(i) || !l.contains(j) {
            return Err(describe("I and J must lie inside L"));
        }
        let (a, b) = (i.generation - l.generation, j.generation - l.generation);
        if (a, b) != (self.m, self.n) && (a, b) != (self.n, self.m) {
            return Err(describe("generation offsets do not match (m, n)"));
        }
        if i.generation >= self.depth || j.generation >= self.depth {
            return Err(describe("Haar interval at or below the leaf level"));
        }
        if !le(&c.abs(), &self.bound()) {
            return Err(Error::CoefficientBound {
                outer: l.as_pair(),
                input: i.as_pair(),
                output: j.as_pair(),
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, key: ShiftKey, c: T) -> Result<()> {
        self.validate(&key, &c)?;
        self.entries.insert(key, c);
        Ok(())
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn log_len(&self) -> i32 {
        self.log_len
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// `max(m, n) + 1`.
    pub fn complexity(&self) -> u32 {
        self.m.max(self.n) + 1
    }

    pub fn entries(&self) -> &BTreeMap<ShiftKey, T> {
        &self.entries
    }

    /// Every coefficient has the maximal modulus `2^{-(m+n)/2}`.
    pub fn is_normalized_extremal(&self) -> bool {
        let b = self.bound();
        self.entries.values().all(|c| c.abs() == b)
    }

    /// Parents `L` that carry a full set of Haar descendants.
    pub fn parents(&self) -> impl Iterator<Item = DyadicInterval> + '_ {
        let reach = self.m.max(self.n);
        (0..self.depth)
            .filter(move |&g| g + reach < self.depth)
            .flat_map(|g| (0..1u64 << g).map(move |i| DyadicInterval::new(g, i)))
    }

    fn matches_window(&self, system: &DyadicSystem) -> Result<()> {
        if system.log_len() != self.log_len || system.depth() != self.depth {
            return Err(Error::WindowMismatch);
        }
        Ok(())
    }

    /// Shift with i.i.d. coefficients `±2^{-(m+n)/2}` on every admissible `L`.
    pub fn random_extremal(m: u32, n: u32, system: &DyadicSystem, rng: &mut Rng) -> Result<Self> {
        let reach = m.max(n);
        if reach >= system.depth() {
            return Err(Error::DepthExhausted {
                generation: 0,
                requested: reach + 1,
                depth: system.depth(),
            });
        }
        let mut spec = Self::zero(m, n, system);
        let b = spec.bound();
        let parents: Vec<_> = spec.parents().collect();
        for l in parents {
            for i in l.descendant_indices(m) {
                for j in l.descendant_indices(n) {
                    let c = if rng.random::<bool>() { b.clone() } else { -b.clone() };
                    let key = (
                        l,
                        DyadicInterval::new(l.generation + m, i),
                        DyadicInterval::new(l.generation + n, j),
                    );
                    spec.entries.insert(key, c);
                }
            }
        }
        Ok(spec)
    }

    /// The `(0, 1)` shift `c^L_{L,L^+} = -2^{-1/2}`, `c^L_{L,L^-} = 2^{-1/2}`.
    pub fn petermichl(system: &DyadicSystem) -> Result<Self> {
        if system.depth() < 2 {
            return Err(Error::DepthExhausted {
                generation: 0,
                requested: 2,
                depth: system.depth(),
            });
        }
        let mut spec = Self::zero(0, 1, system);
        let b = spec.bound();
        let parents: Vec<_> = spec.parents().collect();
        for l in parents {
            spec.entries.insert((l, l, l.left()), -b.clone());
            spec.entries.insert((l, l, l.right()), b.clone());
        }
        Ok(spec)
    }

    /// The martingale transform as a `(0, 0)` shift.
    pub fn from_signs(sigma: &SignSequence) -> Self {
        let entries = sigma
            .system
            .non_leaf_intervals()
            .map(|l| ((l, l, l), T::from_i64(sigma.sign(l) as i64)))
            .collect();
        Self {
            m: 0,
            n: 0,
            log_len: sigma.system.log_len(),
            depth: sigma.system.depth(),
            entries,
        }
    }

    /// `S*`: coefficients `c^L_{J,I}`.
    pub fn adjoint(&self) -> Self {
        Self {
            m: self.n,
            n: self.m,
            log_len: self.log_len,
            depth: self.depth,
            entries: self
                .entries
                .iter()
                .map(|(&(l, i, j), c)| ((l, j, i), c.clone()))
                .collect(),
        }
    }

    /// `(S + S*)/2`; exact zeros are dropped.
    pub fn symmetrize(&self) -> Self {
        let half = T::pow2(-1);
        let mut entries: BTreeMap<ShiftKey, T> = BTreeMap::new();
        for (&(l, i, j), c) in &self.entries {
            let h = c.clone() * half.clone();
            *entries.entry((l, i, j)).or_insert_with(T::zero) += h.clone();
            *entries.entry((l, j, i)).or_insert_with(T::zero) += h;
        }
        entries.retain(|_, c| !c.is_zero());
        Self {
            entries,
            ..self.clone()
        }
    }

    pub fn is_self_adjoint(&self) -> bool {
        let zero = T::zero();
        self.entries
            .iter()
            .all(|(&(l, i, j), c)| self.entries.get(&(l, j, i)).unwrap_or(&zero) == c)
    }

    /// Restriction to parents with `|L| = 2^{j + k t}`, `k` the complexity.
    pub fn slice(&self, j: u32) -> Result<Self> {
        let k = self.complexity();
        if j >= k {
            return Err(Error::SliceIndex { j, k });
        }
        let log_len = self.log_len;
        let entries = self
            .entries
            .iter()
            .filter(|((l, _, _), _)| (log_len - l.generation as i32 - j as i32).rem_euclid(k as i32) == 0)
            .map(|(key, c)| (*key, c.clone()))
            .collect();
        Ok(Self {
            entries,
            ..self.clone()
        })
    }

    /// `S f = Σ_L Σ_{I,J} c^L_{I,J} ⟨f, h_I⟩ h_J`.
    pub fn apply(&self, f: &StepFunction<T>) -> Result<StepFunction<T>> {
        self.matches_window(f.system())?;
        let input = f.expansion();
        let mut out = HaarExpansion::zero(f.system().clone(), f.d());
        for (&(_, i, j), c) in &self.entries {
            let src = input.coeff(i).to_vec();
            for (o, s) in out.coeff_mut(j).iter_mut().zip(src) {
                *o += c.clone() * s;
            }
        }
        Ok(out.reconstruct())
    }
}

impl<T: Scalar> LeafOperator<T> for ShiftSpec<T> {
    fn apply(&self, f: &StepFunction<T>) -> Result<StepFunction<T>> {
        ShiftSpec::apply(self, f)
    }
}

#[derive(Serialize, Deserialize)]
struct EntryRecord<T>((u32, u64), (u32, u64), (u32, u64), T);

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
struct ShiftRecord<T> {
    m: u32,
    n: u32,
    #[serde(rename = "M")]
    log_len: i32,
    #[serde(rename = "D")]
    depth: u32,
    entries: Vec<EntryRecord<T>>,
}

impl<T: Scalar + Serialize> Serialize for ShiftSpec<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ShiftRecord {
            m: self.m,
            n: self.n,
            log_len: self.log_len,
            depth: self.depth,
            entries: self
                .entries
                .iter()
                .map(|(&(l, i, j), c)| EntryRecord(l.as_pair(), i.as_pair(), j.as_pair(), c.clone()))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for ShiftSpec<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = ShiftRecord::<T>::deserialize(d)?;
        let system = DyadicSystem::standard(rec.log_len, rec.depth).map_err(D::Error::custom)?;
        let at = |(g, i): (u32, u64)| DyadicInterval::new(g, i);
        let entries = rec
            .entries
            .into_iter()
            .map(|EntryRecord(l, i, j, c)| ((at(l), at(i), at(j)), c))
            .collect();
        ShiftSpec::new(rec.m, rec.n, &system, entries).map_err(D::Error::custom)
    }
}

/// Signs `σ_I = ±1` on the non-leaf intervals of a window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignSequence {
    system: DyadicSystem,
    sigma: Vec<i8>,
}

impl SignSequence {
    pub fn constant(system: &DyadicSystem, sign: i8) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(Error::InvalidSign);
        }
        Ok(Self {
            system: system.clone(),
            sigma: vec![sign; system.non_leaf_count()],
        })
    }

    pub fn random(system: &DyadicSystem, rng: &mut Rng) -> Self {
        Self {
            system: system.clone(),
            sigma: (0..system.non_leaf_count())
                .map(|_| if rng.random::<bool>() { 1 } else { -1 })
                .collect(),
        }
    }

    pub fn from_map(system: &DyadicSystem, map: &BTreeMap<DyadicInterval, i8>) -> Result<Self> {
        let mut seq = Self::constant(system, 1)?;
        for (&interval, &s) in map {
            if s != 1 && s != -1 {
                return Err(Error::InvalidSign);
            }
            if interval.generation >= system.depth() {
                return Err(Error::OutsideWindow {
                    generation: interval.generation,
                    index: interval.index,
                });
            }
            seq.sigma[interval.heap_index()] = s;
        }
        Ok(seq)
    }

    pub fn system(&self) -> &DyadicSystem {
        &self.system
    }

    pub fn sign(&self, interval: DyadicInterval) -> i8 {
        self.sigma[interval.heap_index()]
    }

    pub fn flipped(&self) -> Self {
        Self {
            system: self.system.clone(),
            sigma: self.sigma.iter().map(|s| -s).collect(),
        }
    }

    /// `T_σ f = Σ_I σ_I ⟨f, h_I⟩ h_I`.
    pub fn transform<T: Scalar>(&self, f: &StepFunction<T>) -> Result<StepFunction<T>> {
        if !self.system.same_shape(f.system()) {
            return Err(Error::WindowMismatch);
        }
        let mut e = f.expansion();
        for v in e.mean_mut() {
            *v = T::zero();
        }
        for interval in self.system.non_leaf_intervals() {
            if self.sign(interval) < 0 {
                for v in e.coeff_mut(interval) {
                    *v = -v.clone();
                }
            }
        }
        Ok(e.reconstruct())
    }
}

impl<T: Scalar> LeafOperator<T> for SignSequence {
    fn apply(&self, f: &StepFunction<T>) -> Result<StepFunction<T>> {
        self.transform(f)
    }
}

/// `Π_φ f = Σ_I h_I ⟨φ, h_I⟩ ⟨f⟩_I` for a scalar symbol `φ`.
#[derive(Clone, Debug)]
pub struct Paraproduct<T> {
    symbol: HaarExpansion<T>,
}

/// `Π*_φ g = Σ_I ⟨φ, h_I⟩ ⟨g, h_I⟩ χ_I / |I|`.
#[derive(Clone, Debug)]
pub struct ParaproductAdjoint<T> {
    symbol: HaarExpansion<T>,
}

fn scalar_symbol<T: Scalar>(phi: &StepFunction<T>) -> Result<HaarExpansion<T>> {
    if phi.d() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: phi.d(),
        });
    }
    Ok(phi.expansion())
}

impl<T: Scalar> Paraproduct<T> {
    pub fn new(phi: &StepFunction<T>) -> Result<Self> {
        Ok(Self {
            symbol: scalar_symbol(phi)?,
        })
    }

    pub fn adjoint(&self) -> ParaproductAdjoint<T> {
        ParaproductAdjoint {
            symbol: self.symbol.clone(),
        }
    }
}

impl<T: Scalar> ParaproductAdjoint<T> {
    pub fn new(phi: &StepFunction<T>) -> Result<Self> {
        Ok(Self {
            symbol: scalar_symbol(phi)?,
        })
    }
}

impl<T: Scalar> LeafOperator<T> for Paraproduct<T> {
    fn apply(&self, f: &StepFunction<T>) -> Result<StepFunction<T>> {
        let sys = self.symbol.system();
        if f.system() != sys {
            return Err(Error::WindowMismatch);
        }
        let avg = f.averages();
        let mut out = HaarExpansion::zero(sys.clone(), f.d());
        for interval in sys.non_leaf_intervals() {
            let b = self.symbol.coeff(interval)[0].clone();
            for (o, a) in out.coeff_mut(interval).iter_mut().zip(avg.get(interval)) {
                *o = b.clone() * a.clone();
            }
        }
        Ok(out.reconstruct())
    }
}

impl<T: Scalar> LeafOperator<T> for ParaproductAdjoint<T> {
    fn apply(&self, g: &StepFunction<T>) -> Result<StepFunction<T>> {
        let sys = self.symbol.system();
        if g.system() != sys {
            return Err(Error::WindowMismatch);
        }
        let d = g.d();
        let eg = g.expansion();
        // acc[h] accumulates the terms of all non-leaf ancestors of node h.
        let nodes = (1usize << (sys.depth() + 1)) - 1;
        let mut acc = vec![T::zero(); nodes * d];
        for h in 0..sys.non_leaf_count() {
            let interval = DyadicInterval::from_heap_index(h);
            let w = self.symbol.coeff(interval)[0].clone() * T::pow2(-sys.log_length(interval));
            for c in 0..d {
                let v = acc[h * d + c].clone() + w.clone() * eg.coeff(interval)[c].clone();
                acc[(2 * h + 1) * d + c] = v.clone();
                acc[(2 * h + 2) * d + c] = v;
            }
        }
        let first_leaf = sys.non_leaf_count();
        StepFunction::new(sys.clone(), d, acc.split_off(first_leaf * d))
    }
}

/// Both sides of
/// `Π_φ f + Π*_φ f + ⟨φ⟩_W ⟨f⟩_W = φ f - Σ_I h_I ⟨f, h_I⟩ ⟨φ⟩_I`
/// on a window `W`; the window-mean product is carried on the left.
pub fn paraproduct_identity_sides<T: Scalar>(
    phi: &StepFunction<T>,
    f: &StepFunction<T>,
) -> Result<(StepFunction<T>, StepFunction<T>)> {
    let pi = Paraproduct::new(phi)?;
    let a = pi.apply(f)?;
    let b = pi.adjoint().apply(f)?;
    let phi_mean = phi.average(DyadicInterval::ROOT)?[0].clone();
    let f_mean = f.average(DyadicInterval::ROOT)?;
    let mean: Vec<T> = f_mean.into_iter().map(|v| v * phi_mean.clone()).collect();
    let lhs = a.add(&b)?.add(&StepFunction::constant(f.system().clone(), &mean))?;

    let avg_phi = phi.averages();
    let mut e = f.expansion();
    for v in e.mean_mut() {
        *v = T::zero();
    }
    for interval in f.system().non_leaf_intervals() {
        let w = avg_phi.get(interval)[0].clone();
        for v in e.coeff_mut(interval) {
            *v *= w.clone();
        }
    }
    let rhs = f.times_scalar(phi)?.sub(&e.reconstruct())?;
    Ok((lhs, rhs))
}

/// `(2|⟨S_j f, g⟩|, Σ_L |L| Σ_{P,Q ∈ 𝒟_k(L)} |⟨Δ_P f, Δ_Q g⟩ + ⟨Δ_Q f, Δ_P g⟩|)`
/// with `Δ_P f = (⟨f⟩_P - ⟨f⟩_L)/2^k`, summed over the parents present in
/// the slice.
pub fn slice_bilinear_sides<T: Scalar>(
    slice: &ShiftSpec<T>,
    f: &StepFunction<T>,
    g: &StepFunction<T>,
) -> Result<(T, T)> {
    f.compatible(g)?;
    let lhs = slice.apply(f)?.inner(g)?.abs() * T::from_i64(2);
    let k = slice.complexity();
    let sys = f.system();
    let (af, ag) = (f.averages(), g.averages());
    let scale = T::pow2(-(k as i32));
    let mut parents: Vec<DyadicInterval> = slice.entries.keys().map(|&(l, _, _)| l).collect();
    parents.dedup();
    let mut rhs = T::zero();
    for l in parents {
        let cells = sys.descendants(l, k)?;
        let centred = |avg: &crate::signal::Averages<T>| -> Vec<Vec<T>> {
            let base = avg.get(l);
            cells
                .iter()
                .map(|&p| {
                    avg.get(p)
                        .iter()
                        .zip(base)
                        .map(|(a, b)| (a.clone() - b.clone()) * scale.clone())
                        .collect()
                })
                .collect()
        };
        let (df, dg) = (centred(&af), centred(&ag));
        let mut block = T::zero();
        for p in 0..cells.len() {
            for q in 0..cells.len() {
                block += (dot(&df[p], &dg[q]) + dot(&df[q], &dg[p])).abs();
            }
        }
        rhs += block * T::pow2(sys.log_length(l));
    }
    Ok((lhs, rhs))
}

/// Dense matrix of `op` on leaf-value coordinates (`leaf * d + component`).
pub fn operator_matrix<O: LeafOperator<f64> + ?Sized>(
    op: &O,
    system: &DyadicSystem,
    d: usize,
    cap: usize,
) -> Result<DMatrix<f64>> {
    let size = system.leaf_count() * d;
    if size > cap {
        return Err(Error::DimensionOverflow { size, cap });
    }
    let mut mat = DMatrix::zeros(size, size);
    let mut basis = vec![0.0; size];
    for col in 0..size {
        basis[col] = 1.0;
        let e = StepFunction::new(system.clone(), d, basis.clone())?;
        let image = op.apply(&e)?;
        mat.set_column(col, &nalgebra::DVector::from_column_slice(image.values()));
        basis[col] = 0.0;
    }
    Ok(mat)
}

/// Ratio-test summary of `Σ_k (k+1)^P 2^{-δk} (k+1) 2^{k/2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub delta: f64,
    pub poly_degree: u32,
    pub k_max: u32,
    /// Limiting ratio `2^{1/2-δ}` of consecutive terms.
    pub ratio: f64,
    pub convergent: bool,
    pub partial_sums: Vec<f64>,
    /// Upper bound on `Σ_{k>k_max}` when the series converges.
    pub tail_bound: Option<f64>,
    /// Smallest `k_max` whose tail bound is at most `tolerance`.
    pub k_for_tolerance: Option<u32>,
    pub tolerance: f64,
    pub stabilized: bool,
}

fn series_term(k: u32, delta: f64, degree: u32) -> f64 {
    let kk = k as f64 + 1.0;
    kk.powi(degree as i32 + 1) * (2f64.ln() * (0.5 - delta) * k as f64).exp()
}

/// Tail bound `a_K ρ/(1-ρ)` with `ρ = ((K+2)/(K+1))^{P+1} 2^{1/2-δ}`, valid
/// because consecutive ratios decrease in `k`.
fn series_tail(k: u32, delta: f64, degree: u32) -> Option<f64> {
    let r = 2f64.powf(0.5 - delta);
    let rho = ((k as f64 + 2.0) / (k as f64 + 1.0)).powi(degree as i32 + 1) * r;
    (rho < 1.0).then(|| series_term(k, delta, degree) * rho / (1.0 - rho))
}

pub fn series_bound(delta: f64, poly_degree: u32, k_max: u32, tolerance: f64) -> Result<SeriesReport> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta = {delta} must be positive")));
    }
    let ratio = 2f64.powf(0.5 - delta);
    let convergent = ratio < 1.0;
    let mut partial_sums = Vec::with_capacity(k_max as usize + 1);
    let mut acc = 0.0;
    for k in 0..=k_max {
        acc += series_term(k, delta, poly_degree);
        partial_sums.push(acc);
    }
    let tail_bound = if convergent {
        series_tail(k_max, delta, poly_degree)
    } else {
        None
    };
    let k_for_tolerance = if convergent {
        (0..=1_000_000u32).find(|&k| series_tail(k, delta, poly_degree).is_some_and(|t| t <= tolerance))
    } else {
        None
    };
    Ok(SeriesReport {
        delta,
        poly_degree,
        k_max,
        ratio,
        convergent,
        partial_sums,
        tail_bound,
        k_for_tolerance,
        tolerance,
        stabilized: tail_bound.is_some_and(|t| t <= tolerance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, trial_rng};
    use crate::scalar::Exact;

    fn unit(depth: u32) -> DyadicSystem {
        DyadicSystem::standard(0, depth).unwrap()
    }

    fn ex(n: i64) -> Exact {
        Exact::from_i64(n)
    }

    #[test]
    fn single_coefficient_shift() {
        let sys = unit(1);
        let r = DyadicInterval::ROOT;
        let mut map = BTreeMap::new();
        map.insert((r, r, r), ex(1));
        let s = ShiftSpec::new(0, 0, &sys, map).unwrap();
        let f = StepFunction::scalar(sys.clone(), vec![ex(3), ex(1)]).unwrap();
        assert_eq!(s.apply(&f).unwrap().values(), &[ex(1), ex(-1)]);
        let z = ShiftSpec::<Exact>::zero(0, 0, &sys);
        assert_eq!(z.apply(&f).unwrap(), StepFunction::zeros(sys, 1));
    }

    #[test]
    fn bound_violation_is_rejected() {
        let sys = unit(3);
        let r = DyadicInterval::ROOT;
        let mut map = BTreeMap::new();
        map.insert((r, r, r.left()), 0.75);
        assert!(matches!(
            ShiftSpec::new(0, 1, &sys, map),
            Err(Error::CoefficientBound { .. })
        ));
        let mut bad = BTreeMap::new();
        bad.insert((r, r.left(), r.left()), 0.1);
        assert!(matches!(ShiftSpec::new(0, 0, &sys, bad), Err(Error::ShiftEntry(_))));
    }

    #[test]
    fn constants_are_annihilated() {
        let sys = DyadicSystem::sample(8, -1, 5, 0).unwrap();
        let mut rng = rng_from_seed(1);
        let s = ShiftSpec::<Exact>::random_extremal(1, 2, &sys, &mut rng).unwrap();
        assert!(s.is_normalized_extremal());
        assert_eq!(s.complexity(), 3);
        let c = StepFunction::constant(sys.clone(), &[ex(5), ex(-2)]);
        assert_eq!(s.apply(&c).unwrap(), StepFunction::zeros(sys, 2));
    }

    #[test]
    fn petermichl_on_root_haar() {
        let sys = unit(2);
        let s = ShiftSpec::<Exact>::petermichl(&sys).unwrap();
        assert!(s.is_normalized_extremal());
        let h = StepFunction::haar(sys.clone(), DyadicInterval::ROOT).unwrap();
        // Direct summation: c_{L,L+} h_{L+} + c_{L,L-} h_{L-} with ⟨h, h_L⟩ = 1.
        let rt = Exact::sqrt2_pow(-1);
        let plus = StepFunction::haar(sys.clone(), DyadicInterval::new(1, 0)).unwrap();
        let minus = StepFunction::haar(sys.clone(), DyadicInterval::new(1, 1)).unwrap();
        let direct = plus.scale(&-rt.clone()).add(&minus.scale(&rt)).unwrap();
        let out = s.apply(&h).unwrap();
        assert_eq!(out, direct);
        assert_eq!(out.values(), &[ex(-1), ex(1), ex(1), ex(-1)]);
        let c = StepFunction::constant(sys.clone(), &[ex(3)]);
        assert_eq!(s.apply(&c).unwrap(), StepFunction::zeros(sys, 1));
    }

    #[test]
    fn martingale_transform_examples() {
        let sys = unit(1);
        let f = StepFunction::scalar(sys.clone(), vec![ex(3), ex(1)]).unwrap();
        let neg = SignSequence::constant(&sys, -1).unwrap();
        assert_eq!(neg.transform(&f).unwrap().values(), &[ex(-1), ex(1)]);
        let pos = SignSequence::constant(&sys, 1).unwrap();
        assert_eq!(pos.transform(&f).unwrap().values(), &[ex(1), ex(-1)]);
        assert!(SignSequence::constant(&sys, 0).is_err());
        let mut map = BTreeMap::new();
        map.insert(DyadicInterval::ROOT, 2);
        assert!(matches!(SignSequence::from_map(&sys, &map), Err(Error::InvalidSign)));
    }

    #[test]
    fn martingale_transform_involution() {
        let sys = unit(6);
        for t in 0..20 {
            let mut rng = trial_rng(3, t);
            let sigma = SignSequence::random(&sys, &mut rng);
            let f = StepFunction::<Exact>::random_integer(sys.clone(), 1, 7, &mut rng);
            let twice = sigma.transform(&sigma.transform(&f).unwrap()).unwrap();
            let mean = f.average(DyadicInterval::ROOT).unwrap();
            let centred = f.sub(&StepFunction::constant(sys.clone(), &mean)).unwrap();
            assert_eq!(twice, centred);
            assert_eq!(
                ShiftSpec::from_signs(&sigma).apply(&f).unwrap(),
                sigma.transform(&f).unwrap()
            );
            assert_eq!(sigma.transform(&f).unwrap().l2_norm_sq(), centred.l2_norm_sq());
        }
    }

    #[test]
    fn paraproduct_examples() {
        let sys = unit(3);
        let h = StepFunction::<Exact>::haar(sys.clone(), DyadicInterval::ROOT).unwrap();
        let one = StepFunction::constant(sys.clone(), &[ex(1)]);
        assert_eq!(Paraproduct::new(&h).unwrap().apply(&one).unwrap(), h);
        let c = StepFunction::constant(sys.clone(), &[ex(4)]);
        let mut rng = rng_from_seed(6);
        let f = StepFunction::<Exact>::random_integer(sys.clone(), 1, 5, &mut rng);
        assert_eq!(
            Paraproduct::new(&c).unwrap().apply(&f).unwrap(),
            StepFunction::zeros(sys, 1)
        );
    }

    #[test]
    fn paraproduct_identity_exact() {
        let sys = DyadicSystem::sample(2, 0, 6, 0).unwrap();
        for t in 0..25 {
            let mut rng = trial_rng(12, t);
            let phi = StepFunction::<Exact>::random_integer(sys.clone(), 1, 6, &mut rng);
            let f = StepFunction::<Exact>::random_integer(sys.clone(), 2, 6, &mut rng);
            let (lhs, rhs) = paraproduct_identity_sides(&phi, &f).unwrap();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn paraproduct_adjoint_matches_transpose() {
        let sys = unit(5);
        let mut rng = rng_from_seed(4);
        let phi = StepFunction::random_uniform(sys.clone(), 1, &mut rng);
        let pi = Paraproduct::new(&phi).unwrap();
        let a = operator_matrix(&pi, &sys, 1, 4096).unwrap();
        let b = operator_matrix(&pi.adjoint(), &sys, 1, 4096).unwrap();
        assert!((a.transpose() - b).amax() < 1e-12);
    }

    #[test]
    fn slice_partition_and_levels() {
        let sys = unit(7);
        let mut rng = rng_from_seed(21);
        let s = ShiftSpec::<Exact>::random_extremal(1, 0, &sys, &mut rng).unwrap();
        assert_eq!(s.slice(0).unwrap(), s.slice(0).unwrap());
        let f = StepFunction::<Exact>::random_integer(sys.clone(), 1, 5, &mut rng);
        let parts = s
            .slice(0)
            .unwrap()
            .apply(&f)
            .unwrap()
            .add(&s.slice(1).unwrap().apply(&f).unwrap())
            .unwrap();
        assert_eq!(parts, s.apply(&f).unwrap());
        assert!(matches!(s.slice(2), Err(Error::SliceIndex { j: 2, k: 2 })));
        let s1 = ShiftSpec::<Exact>::random_extremal(0, 0, &sys, &mut rng).unwrap();
        assert_eq!(s1.slice(0).unwrap(), s1);
        assert_eq!(slice_generations(0, 9, 1, 3, 0), vec![2, 5, 8]);
    }

    #[test]
    fn symmetrize_properties() {
        let sys = unit(5);
        let mut rng = rng_from_seed(2);
        let s = ShiftSpec::<Exact>::random_extremal(1, 2, &sys, &mut rng).unwrap();
        let sym = s.symmetrize();
        assert!(sym.is_self_adjoint());
        assert_eq!(sym.symmetrize(), sym);
        for c in sym.entries().values() {
            assert!(le(&c.abs(), &sym.bound()));
        }
        let f = StepFunction::<Exact>::random_integer(sys.clone(), 1, 4, &mut rng);
        let g = StepFunction::<Exact>::random_integer(sys.clone(), 1, 4, &mut rng);
        assert_eq!(
            sym.apply(&f).unwrap().inner(&g).unwrap(),
            f.inner(&sym.apply(&g).unwrap()).unwrap()
        );
        assert_eq!(
            s.adjoint().apply(&f).unwrap().inner(&g).unwrap(),
            f.inner(&s.apply(&g).unwrap()).unwrap()
        );
    }

    #[test]
    fn shift_matrix_cross_check() {
        let sys = unit(6);
        let mut rng = rng_from_seed(8);
        let s = ShiftSpec::<f64>::random_extremal(2, 1, &sys, &mut rng).unwrap();
        let mat = operator_matrix(&s, &sys, 2, 4096).unwrap();
        let f = StepFunction::random_uniform(sys.clone(), 2, &mut rng);
        let direct = s.apply(&f).unwrap();
        let via = &mat * nalgebra::DVector::from_column_slice(f.values());
        let diff = via
            .iter()
            .zip(direct.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
        let sym = s.symmetrize();
        let ms = operator_matrix(&sym, &sys, 1, 4096).unwrap();
        assert!((&ms - ms.transpose()).amax() < 1e-15);
        let z = operator_matrix(&ShiftSpec::<f64>::zero(0, 0, &sys), &sys, 1, 4096).unwrap();
        assert_eq!(z.amax(), 0.0);
        let id = ShiftSpec::<f64>::from_signs(&SignSequence::constant(&sys, 1).unwrap());
        let mi = operator_matrix(&id, &sys, 1, 4096).unwrap();
        assert!((&mi - mi.transpose()).amax() < 1e-15);
        assert!(matches!(
            operator_matrix(&s, &sys, 2, 100),
            Err(Error::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn slice_majorant_examples() {
        let sys = unit(4);
        let r = DyadicInterval::ROOT;
        let mut map = BTreeMap::new();
        map.insert((r, r, r), 1.0);
        let s = ShiftSpec::new(0, 0, &sys, map).unwrap();
        let h = StepFunction::haar(sys.clone(), r).unwrap();
        let (lhs, rhs) = slice_bilinear_sides(&s, &h, &h).unwrap();
        assert!((lhs - 2.0).abs() < 1e-12);
        assert!(lhs <= rhs + 1e-12);
        let c = StepFunction::constant(sys.clone(), &[2.0]);
        assert_eq!(slice_bilinear_sides(&s, &c, &h).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn series_examples() {
        let one = series_bound(1.0, 2, 60, 1e-6).unwrap();
        assert!(one.convergent);
        assert!((one.ratio - 2f64.powf(-0.5)).abs() < 1e-15);
        let half = series_bound(0.5, 2, 60, 1e-6).unwrap();
        assert!(!half.convergent);
        assert!(half.tail_bound.is_none());
        assert!(series_bound(0.0, 2, 60, 1e-6).is_err());
    }

    #[test]
    fn series_tail_brackets_limit() {
        // Closed form: Σ (k+1)^3 x^k = (1 + 4x + x²)/(1 - x)^4.
        let x = 2f64.powf(-0.25);
        let limit = (1.0 + 4.0 * x + x * x) / (1.0 - x).powi(4);
        let r = series_bound(0.75, 2, 60, 1e-6).unwrap();
        let s = *r.partial_sums.last().unwrap();
        let tail = r.tail_bound.unwrap();
        assert!(s < limit && limit <= s + tail);
        assert!(!r.stabilized);
        let k = r.k_for_tolerance.unwrap();
        let later = series_bound(0.75, 2, k, 1e-6).unwrap();
        assert!(later.stabilized);
        assert!(limit - later.partial_sums.last().unwrap() <= 1e-6 * 1.0001);
    }

    #[test]
    fn json_round_trip() {
        let sys = unit(4);
        let mut rng = rng_from_seed(3);
        let s = ShiftSpec::<Exact>::random_extremal(1, 1, &sys, &mut rng).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ShiftSpec<Exact> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
