//! Bellman points, martingale trees, the modified martingale of the main
//! estimate, and finite-depth Bellman oracles.
//!
//! A point `A = (f, F, g, G)` lies in the domain when `‖f‖_q^p <= F` and
//! `‖g‖_{q'}^{p'} <= G`.  The oracle [`GridBellman`] computes the depth-`D`
//! surrogate
//!
//! `B_0 = 0`, `B_{t+1}(A) = max (B_t(A_+) + B_t(A_-))/2 + |Δf · Δg|`
//!
//! over splits `A = (A_+ + A_-)/2` restricted to a uniform grid.  Every value
//! it returns is attained by an actual pair of step functions, so it bounds
//! the true Bellman function from below.  For the scalar case `p = 2` the
//! true function is `4 √((F - f²)(G - g²))` ([`QuadraticBellman`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::DyadicInterval;
use crate::error::{Error, Result};
use crate::scalar::{le, Scalar};
use crate::schur::{find_alpha, AlphaReport, LambdaMatrix};
use crate::signal::{dot, norm_q, SpaceSpec, StepFunction};

/// `‖v‖_q^p`; exact when `p = q = 2`.
pub fn norm_pow<T: Scalar>(v: &[T], p: f64, q: f64) -> T {
    if p == 2.0 && q == 2.0 {
        return dot(v, v);
    }
    let w: Vec<f64> = v.iter().map(Scalar::to_f64).collect();
    T::from_f64(norm_q(&w, q).powf(p))
}

fn approx_le<T: Scalar>(a: &T, b: &T) -> bool {
    if T::EXACT {
        le(a, b)
    } else {
        let (x, y) = (a.to_f64(), b.to_f64());
        x <= y + 1e-12 * x.abs().max(y.abs()).max(1.0)
    }
}

fn approx_eq<T: Scalar>(a: &T, b: &T, scale: f64) -> bool {
    (a.clone() - b.clone()).is_negligible(scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BellmanPoint<T> {
    pub f: Vec<T>,
    #[serde(rename = "F")]
    pub big_f: T,
    pub g: Vec<T>,
    #[serde(rename = "G")]
    pub big_g: T,
}

impl<T: Scalar> BellmanPoint<T> {
    pub fn new(f: Vec<T>, big_f: T, g: Vec<T>, big_g: T) -> Self {
        Self { f, big_f, g, big_g }
    }

    pub fn zero(d: usize) -> Self {
        Self::new(vec![T::zero(); d], T::zero(), vec![T::zero(); d], T::zero())
    }

    pub fn in_domain(&self, space: &SpaceSpec) -> bool {
        approx_le(&norm_pow(&self.f, space.p, space.q), &self.big_f)
            && approx_le(&norm_pow(&self.g, space.p_dual(), space.q_dual()), &self.big_g)
    }

    pub fn check_domain(&self, space: &SpaceSpec) -> Result<()> {
        if self.in_domain(space) {
            Ok(())
        } else {
            Err(Error::OutsideDomain(format!(
                "point {:?} violates ‖f‖^p <= F or ‖g‖^p' <= G",
                self.to_f64()
            )))
        }
    }

    /// `Σ w_i A_i`.
    pub fn combination(points: &[&BellmanPoint<T>], weights: &[T]) -> Self {
        let d = points[0].f.len();
        let mut out = Self::zero(d);
        for (p, w) in points.iter().zip(weights) {
            out.axpy(w, p);
        }
        out
    }

    fn axpy(&mut self, w: &T, p: &BellmanPoint<T>) {
        for (a, b) in self.f.iter_mut().zip(&p.f) {
            *a += w.clone() * b.clone();
        }
        for (a, b) in self.g.iter_mut().zip(&p.g) {
            *a += w.clone() * b.clone();
        }
        self.big_f += w.clone() * p.big_f.clone();
        self.big_g += w.clone() * p.big_g.clone();
    }

    pub fn scale(&self, w: &T) -> Self {
        let mut out = Self::zero(self.f.len());
        out.axpy(w, self);
        out
    }

    pub fn midpoint(a: &BellmanPoint<T>, b: &BellmanPoint<T>) -> Self {
        let h = T::pow2(-1);
        Self::combination(&[a, b], &[h.clone(), h])
    }

    fn coords(&self) -> impl Iterator<Item = &T> {
        self.f
            .iter()
            .chain(std::iter::once(&self.big_f))
            .chain(&self.g)
            .chain(std::iter::once(&self.big_g))
    }

    fn scale_hint(&self) -> f64 {
        self.coords().map(|v| v.abs().to_f64()).fold(0.0, f64::max)
    }

    /// Coordinate-wise equality, exact for exact scalars.
    pub fn matches(&self, other: &BellmanPoint<T>) -> bool {
        let scale = self.scale_hint().max(other.scale_hint());
        self.f.len() == other.f.len() && self.coords().zip(other.coords()).all(|(a, b)| approx_eq(a, b, scale))
    }

    pub fn max_abs_diff(&self, other: &BellmanPoint<T>) -> f64 {
        self.coords()
            .zip(other.coords())
            .map(|(a, b)| (a.clone() - b.clone()).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn to_f64(&self) -> BellmanPoint<f64> {
        BellmanPoint {
            f: self.f.iter().map(Scalar::to_f64).collect(),
            big_f: self.big_f.to_f64(),
            g: self.g.iter().map(Scalar::to_f64).collect(),
            big_g: self.big_g.to_f64(),
        }
    }
}

/// Points `A_I` on a complete dyadic tree below `I₀` obeying the martingale
/// dynamics `A_I = (A_{I^+} + A_{I^-})/2`; stored in heap order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTree<T> {
    space: SpaceSpec,
    depth: u32,
    points: Vec<BellmanPoint<T>>,
}

impl<T: Scalar> MartingaleTree<T> {
    /// Builds the tree whose generation-`depth` points are `leaves`.
    pub fn from_leaves(space: SpaceSpec, leaves: Vec<BellmanPoint<T>>) -> Result<Self> {
        let n = leaves.len();
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::InvalidParameter(format!("leaf count {n} is not a power of two")));
        }
        for leaf in &leaves {
            leaf.check_domain(&space)?;
        }
        let depth = n.trailing_zeros();
        let first_leaf = n - 1;
        let mut points = vec![BellmanPoint::zero(leaves[0].f.len()); first_leaf];
        points.extend(leaves);
        for h in (0..first_leaf).rev() {
            points[h] = BellmanPoint::midpoint(&points[2 * h + 1], &points[2 * h + 2]);
        }
        Ok(Self { space, depth, points })
    }

    /// Accepts a full heap-ordered point list after checking dynamics and
    /// domain.
    pub fn from_points(space: SpaceSpec, points: Vec<BellmanPoint<T>>) -> Result<Self> {
        let n = points.len() + 1;
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::InvalidParameter(format!(
                "{} points do not form a complete tree",
                points.len()
            )));
        }
        let tree = Self {
            space,
            depth: n.trailing_zeros() - 1,
            points,
        };
        tree.verify()?;
        Ok(tree)
    }

    /// `A_I = (⟨f⟩_I, ⟨‖f‖_q^p⟩_I, ⟨g⟩_I, ⟨‖g‖_{q'}^{p'}⟩_I)` for `I ⊆ I₀` down
    /// to `depth` generations below `I₀`.
    pub fn from_functions(
        f: &StepFunction<T>,
        g: &StepFunction<T>,
        i0: DyadicInterval,
        depth: u32,
        space: SpaceSpec,
    ) -> Result<Self> {
        f.compatible(g)?;
        let sys = f.system();
        let below = sys.descendants(i0, depth)?;
        let pow = |h: &StepFunction<T>, p: f64, q: f64| -> Result<StepFunction<T>> {
            let vals = (0..h.leaf_count()).map(|i| norm_pow(h.leaf(i), p, q)).collect();
            StepFunction::scalar(sys.clone(), vals)
        };
        let big_f = pow(f, space.p, space.q)?;
        let big_g = pow(g, space.p_dual(), space.q_dual())?;
        let (af, ag, abf, abg) = (f.averages(), g.averages(), big_f.averages(), big_g.averages());
        let leaves = below
            .into_iter()
            .map(|j| {
                BellmanPoint::new(
                    af.get(j).to_vec(),
                    abf.get(j)[0].clone(),
                    ag.get(j).to_vec(),
                    abg.get(j)[0].clone(),
                )
            })
            .collect();
        Self::from_leaves(space, leaves)
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn point(&self, interval: DyadicInterval) -> &BellmanPoint<T> {
        &self.points[interval.heap_index()]
    }

    pub fn generation(&self, g: u32) -> Vec<&BellmanPoint<T>> {
        (0..1u64 << g).map(|i| self.point(DyadicInterval::new(g, i))).collect()
    }

    /// Dynamics and domain conditions.
    pub fn verify(&self) -> Result<()> {
        for h in 0..self.points.len() {
            let interval = DyadicInterval::from_heap_index(h);
            if interval.generation < self.depth {
                let mid = BellmanPoint::midpoint(self.point(interval.left()), self.point(interval.right()));
                if !mid.matches(&self.points[h]) {
                    return Err(Error::DynamicsViolation {
                        generation: interval.generation,
                        index: interval.index,
                    });
                }
            }
            self.points[h].check_domain(&self.space)?;
        }
        Ok(())
    }

    pub fn to_f64(&self) -> MartingaleTree<f64> {
        MartingaleTree {
            space: self.space,
            depth: self.depth,
            points: self.points.iter().map(BellmanPoint::to_f64).collect(),
        }
    }
}

/// The perturbed martingale `A_I^±` with weights `a_I^± = 1 ± α_I` on
/// `𝒟_k(I₀)` and transition probabilities `θ_I^±`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModifiedMartingale<T> {
    k: u32,
    alpha: Vec<T>,
    /// `A_I^±` for generations `0..=k`, heap order; index 0 is `A_{I₀}^±`.
    pub plus: Vec<BellmanPoint<T>>,
    pub minus: Vec<BellmanPoint<T>>,
    /// `θ_I^±` for generations `1..=k`, heap order (index 0 unused).
    pub theta_plus: Vec<T>,
    pub theta_minus: Vec<T>,
    pub a_plus: Vec<T>,
    pub a_minus: Vec<T>,
}

/// Outcome of every exact check on a modified martingale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifiedChecks {
    pub theta_sum_one: bool,
    pub convex_combination: bool,
    pub theta_bounds: bool,
    pub weight_bounds: bool,
    pub product_formula: bool,
    pub root_midpoint: bool,
    pub leaves_fixed: bool,
    pub pairing_identity: bool,
    pub domain: bool,
}

impl ModifiedChecks {
    pub fn all(&self) -> bool {
        self.theta_sum_one
            && self.convex_combination
            && self.theta_bounds
            && self.weight_bounds
            && self.product_formula
            && self.root_midpoint
            && self.leaves_fixed
            && self.pairing_identity
            && self.domain
    }
}

/// `|α_I| <= 1/4` and `Σ α_I = 0`.
pub fn check_alpha<T: Scalar>(alpha: &[T]) -> Result<()> {
    let quarter = T::pow2(-2);
    if let Some(i) = alpha.iter().position(|a| !approx_le(&a.abs(), &quarter)) {
        return Err(Error::AlphaConstraint(format!(
            "|alpha[{i}]| = {} exceeds 1/4",
            alpha[i].abs().to_f64()
        )));
    }
    let mut sum = T::zero();
    for a in alpha {
        sum += a.clone();
    }
    if !sum.is_negligible(alpha.len() as f64) {
        return Err(Error::AlphaConstraint(format!(
            "alpha sums to {} instead of 0",
            sum.to_f64()
        )));
    }
    Ok(())
}

impl<T: Scalar> ModifiedMartingale<T> {
    pub fn new(tree: &MartingaleTree<T>, alpha: &[T], k: u32) -> Result<Self> {
        if k == 0 || k > tree.depth() {
            return Err(Error::DepthExhausted {
                generation: 0,
                requested: k,
                depth: tree.depth(),
            });
        }
        let n = 1usize << k;
        if alpha.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: alpha.len(),
            });
        }
        check_alpha(alpha)?;
        let one = T::one();
        let a_plus: Vec<T> = alpha.iter().map(|a| one.clone() + a.clone()).collect();
        let a_minus: Vec<T> = alpha.iter().map(|a| one.clone() - a.clone()).collect();
        let build = |a: &[T]| -> (Vec<BellmanPoint<T>>, Vec<T>) {
            let nodes = 2 * n - 1;
            let d = tree.point(DyadicInterval::ROOT).f.len();
            let mut sums = vec![T::zero(); nodes];
            let mut weighted = vec![BellmanPoint::zero(d); nodes];
            for (i, w) in a.iter().enumerate() {
                let h = n - 1 + i;
                sums[h] = w.clone();
                weighted[h] = tree.point(DyadicInterval::new(k, i as u64)).scale(w);
            }
            for h in (0..n - 1).rev() {
                sums[h] = sums[2 * h + 1].clone() + sums[2 * h + 2].clone();
                let (l, r) = (&weighted[2 * h + 1], &weighted[2 * h + 2]);
                weighted[h] = BellmanPoint::combination(&[l, r], &[one.clone(), one.clone()]);
            }
            let points = weighted
                .iter()
                .zip(&sums)
                .map(|(w, s)| w.scale(&(one.clone() / s.clone())))
                .collect();
            let mut theta = vec![T::zero(); nodes];
            for h in 1..nodes {
                theta[h] = sums[h].clone() / sums[(h - 1) / 2].clone();
            }
            (points, theta)
        };
        let (plus, theta_plus) = build(&a_plus);
        let (minus, theta_minus) = build(&a_minus);
        Ok(Self {
            k,
            alpha: alpha.to_vec(),
            plus,
            minus,
            theta_plus,
            theta_minus,
            a_plus,
            a_minus,
        })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn root_plus(&self) -> &BellmanPoint<T> {
        &self.plus[0]
    }

    pub fn root_minus(&self) -> &BellmanPoint<T> {
        &self.minus[0]
    }

    /// `⟨f^± - f_{I₀}, g^± - g_{I₀}⟩` for the plus and minus roots.
    pub fn root_pairings(&self, tree: &MartingaleTree<T>) -> (T, T) {
        let root = tree.point(DyadicInterval::ROOT);
        let pair = |p: &BellmanPoint<T>| {
            let df: Vec<T> = p.f.iter().zip(&root.f).map(|(a, b)| a.clone() - b.clone()).collect();
            let dg: Vec<T> = p.g.iter().zip(&root.g).map(|(a, b)| a.clone() - b.clone()).collect();
            dot(&df, &dg)
        };
        (pair(self.root_plus()), pair(self.root_minus()))
    }

    pub fn check(&self, tree: &MartingaleTree<T>) -> ModifiedChecks {
        let n = 1usize << self.k;
        let nodes = 2 * n - 1;
        let one = T::one();
        let interior = 0..n - 1;
        let sides = [
            (&self.plus, &self.theta_plus, &self.a_plus),
            (&self.minus, &self.theta_minus, &self.a_minus),
        ];

        let theta_sum_one = sides.iter().all(|(_, th, _)| {
            interior
                .clone()
                .all(|h| approx_eq(&(th[2 * h + 1].clone() + th[2 * h + 2].clone()), &one, 1.0))
        });
        let convex_combination = sides.iter().all(|(pts, th, _)| {
            interior.clone().all(|h| {
                let c = BellmanPoint::combination(
                    &[&pts[2 * h + 1], &pts[2 * h + 2]],
                    &[th[2 * h + 1].clone(), th[2 * h + 2].clone()],
                );
                c.matches(&pts[h])
            })
        });
        let (lo, hi) = (T::from_i64(3) / T::from_i64(10), T::from_i64(5) / T::from_i64(6));
        let theta_bounds = sides
            .iter()
            .all(|(_, th, _)| (1..nodes).all(|h| le(&lo, &th[h]) && le(&th[h], &hi)));
        let (wlo, whi) = (T::from_i64(3) * T::pow2(-2), T::from_i64(5) * T::pow2(-2));
        let weight_bounds = sides
            .iter()
            .all(|(_, _, a)| a.iter().all(|w| le(&wlo, w) && le(w, &whi)));
        let product_formula = sides.iter().all(|(_, th, a)| {
            (0..n).all(|i| {
                let mut h = n - 1 + i;
                let mut prod = one.clone();
                while h > 0 {
                    prod *= th[h].clone();
                    h = (h - 1) / 2;
                }
                approx_eq(&prod, &(a[i].clone() * T::pow2(-(self.k as i32))), 1.0)
            })
        });
        let root = tree.point(DyadicInterval::ROOT);
        let root_midpoint = BellmanPoint::midpoint(self.root_plus(), self.root_minus()).matches(root);
        let leaves_fixed = (0..n).all(|i| {
            let a = tree.point(DyadicInterval::new(self.k, i as u64));
            self.plus[n - 1 + i].matches(a) && self.minus[n - 1 + i].matches(a)
        });

        let pairing_identity = match LambdaMatrix::from_tree(tree, self.k) {
            Ok(lambda) => {
                let half_q = lambda.quadratic(&self.alpha) * T::pow2(-1);
                let (pp, pm) = self.root_pairings(tree);
                let scale = half_q.abs().to_f64().max(1.0);
                approx_eq(&pp, &half_q, scale) && approx_eq(&pm, &half_q, scale)
            }
            Err(_) => false,
        };
        let space = tree.space();
        let domain = self.plus.iter().chain(&self.minus).all(|p| p.in_domain(space));
        ModifiedChecks {
            theta_sum_one,
            convex_combination,
            theta_bounds,
            weight_bounds,
            product_formula,
            root_midpoint,
            leaves_fixed,
            pairing_identity,
            domain,
        }
    }
}

/// `0 <= B <= 4 β_ref F^{1/p} G^{1/p'}` (relative slack `1e-12` on the upper
/// side for rounding in the bound itself).
pub fn range_check(value: f64, point: &BellmanPoint<f64>, space: &SpaceSpec) -> Result<bool> {
    let beta = space
        .beta_ref
        .ok_or_else(|| Error::InvalidParameter("range check needs a reference constant (d = 1)".into()))?;
    let bound = 4.0 * beta * point.big_f.powf(1.0 / space.p) * point.big_g.powf(1.0 / space.p_dual());
    Ok(value >= 0.0 && value <= bound * (1.0 + 1e-12))
}

/// A scalar Bellman-type function evaluated at finite depth.
pub trait BellmanOracle: Sync {
    fn name(&self) -> &'static str;

    fn value(&self, depth: u32, point: &BellmanPoint<f64>) -> Result<f64>;
}

/// `4 √((F - f²)(G - g²))`, the Bellman function for scalar `p = 2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticBellman;

impl BellmanOracle for QuadraticBellman {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn value(&self, _depth: u32, a: &BellmanPoint<f64>) -> Result<f64> {
        if a.f.len() != 1 || a.g.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: a.f.len(),
            });
        }
        let space = SpaceSpec::scalar(2.0)?;
        a.check_domain(&space)?;
        let x = (a.big_f - a.f[0] * a.f[0]).max(0.0);
        let y = (a.big_g - a.g[0] * a.g[0]).max(0.0);
        Ok(4.0 * (x * y).sqrt())
    }
}

/// Largest grid resolution accepted by [`GridBellman`].
pub const GRID_CAP: usize = 33;
/// Largest depth accepted by [`GridBellman`].
pub const ORACLE_DEPTH_CAP: u32 = 4;

/// Grid indices `(i, j, l, m)` of `(f, F, g, G)`.
pub type GridIndex = [usize; 4];

/// Dynamic-programming surrogate `B_t` for scalar `p`, on the grid
/// `f, g ∈ [-1, 1]`, `F, G ∈ [0, 1]` with `r` points per axis.
#[derive(Clone, Debug)]
pub struct GridBellman {
    p: f64,
    r: usize,
    valid_f: Vec<bool>,
    valid_g: Vec<bool>,
    layers: Vec<Vec<f64>>,
}

impl GridBellman {
    /// Computes `B_0, …, B_depth`.
    pub fn new(p: f64, depth: u32, resolution: usize) -> Result<Self> {
        let space = SpaceSpec::scalar(p)?;
        if depth > ORACLE_DEPTH_CAP {
            return Err(Error::InvalidParameter(format!(
                "oracle depth {depth} exceeds {ORACLE_DEPTH_CAP}"
            )));
        }
        if resolution < 3 || resolution > GRID_CAP || resolution % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid resolution {resolution} must be odd and in 3..={GRID_CAP}"
            )));
        }
        let r = resolution;
        let table = |e: f64| -> Vec<bool> {
            let mut t = vec![false; r * r];
            for i in 0..r {
                for j in 0..r {
                    let x = Self::coord_small(r, i);
                    let big = Self::coord_big(r, j);
                    t[i * r + j] = x.abs().powf(e) <= big + 1e-12;
                }
            }
            t
        };
        let mut oracle = Self {
            p,
            r,
            valid_f: table(p),
            valid_g: table(space.p_dual()),
            layers: vec![vec![0.0; r.pow(4)]],
        };
        for _ in 0..depth {
            let next = oracle.step(oracle.layers.last().expect("layer 0 exists"));
            oracle.layers.push(next);
        }
        Ok(oracle)
    }

    fn coord_small(r: usize, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (r - 1) as f64
    }

    fn coord_big(r: usize, j: usize) -> f64 {
        j as f64 / (r - 1) as f64
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn resolution(&self) -> usize {
        self.r
    }

    pub fn max_depth(&self) -> u32 {
        (self.layers.len() - 1) as u32
    }

    fn flat(&self, [i, j, l, m]: GridIndex) -> usize {
        ((i * self.r + j) * self.r + l) * self.r + m
    }

    pub fn is_valid(&self, [i, j, l, m]: GridIndex) -> bool {
        self.valid_f[i * self.r + j] && self.valid_g[l * self.r + m]
    }

    pub fn point_at(&self, [i, j, l, m]: GridIndex) -> BellmanPoint<f64> {
        let r = self.r;
        BellmanPoint::new(
            vec![Self::coord_small(r, i)],
            Self::coord_big(r, j),
            vec![Self::coord_small(r, l)],
            Self::coord_big(r, m),
        )
    }

    /// `B_t` at a grid node.
    pub fn grid_value(&self, depth: u32, idx: GridIndex) -> f64 {
        self.layers[depth as usize][self.flat(idx)]
    }

    /// `|Δf · Δg|` for the split `idx ± δ`.
    pub fn gain(&self, delta: [i64; 4]) -> f64 {
        let h = 2.0 / (self.r - 1) as f64;
        4.0 * h * h * (delta[0].abs() * delta[2].abs()) as f64
    }

    fn step(&self, prev: &[f64]) -> Vec<f64> {
        let r = self.r;
        let h = 2.0 / (r - 1) as f64;
        let unit_gain = 4.0 * h * h;
        (0..r.pow(4))
            .into_par_iter()
            .map(|s| {
                let m = s % r;
                let l = (s / r) % r;
                let j = (s / (r * r)) % r;
                let i = s / (r * r * r);
                let idx = [i, j, l, m];
                if !self.is_valid(idx) {
                    return 0.0;
                }
                let reach = |x: usize| x.min(r - 1 - x) as i64;
                let (ri, rj, rl, rm) = (reach(i), reach(j), reach(l), reach(m));
                let mut best = prev[s];
                // δ and -δ give the same split, so di >= 0.
                for di in 0..=ri {
                    for dj in -rj..=rj {
                        let (ip, jp) = ((i as i64 + di) as usize, (j as i64 + dj) as usize);
                        let (im, jm) = ((i as i64 - di) as usize, (j as i64 - dj) as usize);
                        if !self.valid_f[ip * r + jp] || !self.valid_f[im * r + jm] {
                            continue;
                        }
                        for dl in -rl..=rl {
                            let g = unit_gain * (di * dl.abs()) as f64;
                            let (lp, lm) = ((l as i64 + dl) as usize, (l as i64 - dl) as usize);
                            for dm in -rm..=rm {
                                let (mp, mm) = ((m as i64 + dm) as usize, (m as i64 - dm) as usize);
                                if !self.valid_g[lp * r + mp] || !self.valid_g[lm * r + mm] {
                                    continue;
                                }
                                let a = prev[((ip * r + jp) * r + lp) * r + mp];
                                let b = prev[((im * r + jm) * r + lm) * r + mm];
                                let v = 0.5 * (a + b) + g;
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                    }
                }
                best
            })
            .collect()
    }

    /// Grid node used for an arbitrary domain point: `F` and `G` rounded
    /// down, `f` and `g` rounded toward 0 and moved further toward 0 until
    /// the node is in the domain.  Returns the node and the largest
    /// coordinate displacement.
    pub fn snap(&self, a: &BellmanPoint<f64>) -> Result<(GridIndex, f64)> {
        if a.f.len() != 1 || a.g.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: a.f.len(),
            });
        }
        let r = self.r;
        let tol = 1e-9;
        for (name, x, big) in [("f", a.f[0], a.big_f), ("g", a.g[0], a.big_g)] {
            if x.abs() > 1.0 + tol || big < -tol || big > 1.0 + tol {
                return Err(Error::OutsideDomain(format!(
                    "({name}, {}) = ({x}, {big}) outside the oracle grid [-1,1] x [0,1]",
                    name.to_uppercase()
                )));
            }
        }
        SpaceSpec::scalar(self.p).and_then(|s| a.check_domain(&s))?;
        let step_small = 2.0 / (r - 1) as f64;
        let big_idx = |v: f64| ((v * (r - 1) as f64 + tol).floor().max(0.0) as usize).min(r - 1);
        let centre = (r - 1) / 2;
        let small_idx = |v: f64| {
            let t = (v.abs() / step_small + tol).floor() as usize;
            let t = t.min(centre);
            if v < 0.0 {
                centre - t
            } else {
                centre + t
            }
        };
        let fix = |mut i: usize, j: usize, table: &[bool]| {
            while !table[i * r + j] {
                i = if i > centre { i - 1 } else { i + 1 };
            }
            i
        };
        let j = big_idx(a.big_f);
        let m = big_idx(a.big_g);
        let i = fix(small_idx(a.f[0]), j, &self.valid_f);
        let l = fix(small_idx(a.g[0]), m, &self.valid_g);
        let idx = [i, j, l, m];
        let disp = a.to_f64().max_abs_diff(&self.point_at(idx));
        Ok((idx, disp))
    }

    /// `B_t` at the snapped node of `a`, with the snapping displacement.
    pub fn value_snapped(&self, depth: u32, a: &BellmanPoint<f64>) -> Result<(f64, f64)> {
        if depth > self.max_depth() {
            return Err(Error::InvalidParameter(format!(
                "depth {depth} exceeds computed depth {}",
                self.max_depth()
            )));
        }
        let (idx, disp) = self.snap(a)?;
        Ok((self.grid_value(depth, idx), disp))
    }
}

impl BellmanOracle for GridBellman {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn value(&self, depth: u32, a: &BellmanPoint<f64>) -> Result<f64> {
        Ok(self.value_snapped(depth, a)?.0)
    }
}

/// Both sides of `B_{D+1}(A) >= (B_D(A_+) + B_D(A_-))/2 + |Δf·Δg|` on a grid
/// compatible triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub depth: u32,
    pub lhs: f64,
    pub average: f64,
    pub gain: f64,
    /// `lhs - average - gain`.
    pub slack: f64,
    /// Distance from the requested points to the grid triple used.
    pub snap_displacement: f64,
}

/// The midpoint `A` is snapped first, then the half-difference `(A_+ - A_-)/2`
/// is rounded to a grid offset and shrunk until both ends are admissible.
pub fn concavity_gain_check(
    oracle: &GridBellman,
    depth: u32,
    a_plus: &BellmanPoint<f64>,
    a_minus: &BellmanPoint<f64>,
) -> Result<ConcavityReport> {
    if depth + 1 > oracle.max_depth() {
        return Err(Error::InvalidParameter(format!(
            "concavity check at depth {depth} needs oracle depth {}",
            depth + 1
        )));
    }
    let mid = BellmanPoint::midpoint(a_plus, a_minus);
    let (centre, _) = oracle.snap(&mid)?;
    let r = oracle.r as f64;
    let steps = [2.0 / (r - 1.0), 1.0 / (r - 1.0), 2.0 / (r - 1.0), 1.0 / (r - 1.0)];
    let half = [
        (a_plus.f[0] - a_minus.f[0]) / 2.0,
        (a_plus.big_f - a_minus.big_f) / 2.0,
        (a_plus.g[0] - a_minus.g[0]) / 2.0,
        (a_plus.big_g - a_minus.big_g) / 2.0,
    ];
    let mut delta = [0i64; 4];
    for c in 0..4 {
        delta[c] = (half[c] / steps[c]).round() as i64;
    }
    let shift = |idx: GridIndex, d: [i64; 4], s: i64| -> Option<GridIndex> {
        let mut out = [0usize; 4];
        for c in 0..4 {
            let v = idx[c] as i64 + s * d[c];
            if v < 0 || v >= oracle.r as i64 {
                return None;
            }
            out[c] = v as usize;
        }
        Some(out)
    };
    let admissible = |d: [i64; 4]| {
        matches!((shift(centre, d, 1), shift(centre, d, -1)),
            (Some(p), Some(m)) if oracle.is_valid(p) && oracle.is_valid(m))
    };
    while !admissible(delta) {
        // Shrink the largest coordinate of δ toward 0; δ = 0 is admissible.
        let c = (0..4).max_by_key(|&c| delta[c].abs()).expect("four coordinates");
        delta[c] -= delta[c].signum();
    }
    let plus = shift(centre, delta, 1).expect("admissible");
    let minus = shift(centre, delta, -1).expect("admissible");
    let lhs = oracle.grid_value(depth + 1, centre);
    let average = 0.5 * (oracle.grid_value(depth, plus) + oracle.grid_value(depth, minus));
    let gain = oracle.gain(delta);
    let snap_displacement = a_plus
        .max_abs_diff(&oracle.point_at(plus))
        .max(a_minus.max_abs_diff(&oracle.point_at(minus)));
    Ok(ConcavityReport {
        depth,
        lhs,
        average,
        gain,
        slack: lhs - average - gain,
        snap_displacement,
    })
}

/// Quantities of the main estimate on one tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma51Report {
    pub k: u32,
    pub oracle: String,
    pub oracle_depth: u32,
    pub grid: Option<usize>,
    pub sum_abs_lambda: f64,
    pub alpha: AlphaReport,
    /// `B_D(A_{I₀}) - 2^{-k} Σ_{I ∈ 𝒟_k(I₀)} B_{D-k}(A_I)`.
    pub bellman_drop: f64,
    /// `Σ|λ| / (2^{k/2} · drop)`, absent when the drop is not positive.
    pub c_emp: Option<f64>,
    pub degenerate: bool,
    /// `(oracle depth, drop)` for every depth from `k` to `D`.
    pub drop_by_depth: Vec<(u32, f64)>,
    /// `|⟨f^± - f_{I₀}, g^± - g_{I₀}⟩|` against `½|αᵀΛα|`.
    pub pairing_plus: f64,
    pub pairing_minus: f64,
    pub half_quadratic: f64,
    pub pairing_identity_error: f64,
    /// `¼(B_D(A_{I₀}) - (B_{D-1}(A^+) + B_{D-1}(A^-))/2) - |⟨f^+ - f_{I₀}, g^+ - g_{I₀}⟩|`.
    pub slack: f64,
    /// Largest snapping displacement over all evaluated points (grid only).
    pub snap_displacement: f64,
    pub modified_checks: ModifiedChecks,
}

/// Scale factors `(λ, μ)` mapping all `F` into `[0, target]` and all `G`
/// into `[0, target]`; Bellman values scale by `λμ`.
fn homogeneity_scales(points: &[&BellmanPoint<f64>], space: &SpaceSpec, target: f64) -> (f64, f64) {
    let max_f = points.iter().map(|p| p.big_f).fold(0.0, f64::max);
    let max_g = points.iter().map(|p| p.big_g).fold(0.0, f64::max);
    let lam = if max_f > 0.0 {
        (target / max_f).powf(1.0 / space.p)
    } else {
        1.0
    };
    let mu = if max_g > 0.0 {
        (target / max_g).powf(1.0 / space.p_dual())
    } else {
        1.0
    };
    (lam, mu)
}

fn rescale(a: &BellmanPoint<f64>, lam: f64, mu: f64, space: &SpaceSpec) -> BellmanPoint<f64> {
    BellmanPoint::new(
        a.f.iter().map(|v| v * lam).collect(),
        a.big_f * lam.powf(space.p),
        a.g.iter().map(|v| v * mu).collect(),
        a.big_g * mu.powf(space.p_dual()),
    )
}

/// Relative size below which a Bellman drop is treated as zero.
pub const DROP_EPS: f64 = 1e-12;

/// Fraction of the grid range that rescaled points may occupy.
pub const SCALE_TARGET: f64 = 0.5;

/// Runs the full chain on a scalar tree: `Λ`, the best `α`, the modified
/// martingale, and both sides of the estimate with `oracle`.  All points are
/// rescaled by a common homogeneity factor before evaluation.
pub fn lemma51_verify(
    tree: &MartingaleTree<f64>,
    k: u32,
    oracle: &dyn BellmanOracle,
    oracle_depth: u32,
    grid: Option<&GridBellman>,
    kg: f64,
) -> Result<Lemma51Report> {
    if oracle_depth < k {
        return Err(Error::InvalidParameter(format!(
            "oracle depth {oracle_depth} is below k = {k}"
        )));
    }
    let space = *tree.space();
    let lambda = LambdaMatrix::from_tree(tree, k)?;
    let alpha = find_alpha(&lambda, kg);
    let modified = ModifiedMartingale::new(tree, &alpha.alpha, k)?;
    let checks = modified.check(tree);

    let root = tree.point(DyadicInterval::ROOT);
    let level = tree.generation(k);
    let mut all: Vec<&BellmanPoint<f64>> = level.clone();
    all.extend([root, modified.root_plus(), modified.root_minus()]);
    let (lam, mu) = homogeneity_scales(&all, &space, SCALE_TARGET);
    let unscale = 1.0 / (lam * mu);
    let mut snap_displacement = 0.0f64;
    let mut eval = |depth: u32, a: &BellmanPoint<f64>| -> Result<f64> {
        let s = rescale(a, lam, mu, &space);
        if let Some(g) = grid {
            snap_displacement = snap_displacement.max(g.snap(&s)?.1);
        }
        Ok(oracle.value(depth, &s)? * unscale)
    };

    let n = level.len() as f64;
    let mut drop_by_depth = Vec::new();
    for depth in k..=oracle_depth {
        let top = eval(depth, root)?;
        let mut rest = 0.0;
        for a in &level {
            rest += eval(depth - k, a)?;
        }
        drop_by_depth.push((depth, top - rest / n));
    }
    let bellman_drop = drop_by_depth.last().map_or(0.0, |d| d.1);
    let sum_abs = lambda.sum_abs();
    let root_value = eval(oracle_depth, root)?;
    // A drop at rounding level of B_D(A_{I₀}) counts as zero.
    let degenerate = lambda.is_zero() || bellman_drop <= DROP_EPS * root_value.abs().max(1.0);
    let c_emp = (!degenerate).then(|| sum_abs / (2f64.powf(k as f64 / 2.0) * bellman_drop));

    let (pp, pm) = modified.root_pairings(tree);
    let half_q = 0.5 * alpha.quadratic;
    let b0 = root_value;
    let below = if oracle_depth >= 1 { oracle_depth - 1 } else { 0 };
    let bp = eval(below, modified.root_plus())?;
    let bm = eval(below, modified.root_minus())?;
    let slack = 0.25 * (b0 - 0.5 * (bp + bm)) - pp.abs();

    Ok(Lemma51Report {
        k,
        oracle: oracle.name().into(),
        oracle_depth,
        grid: grid.map(GridBellman::resolution),
        sum_abs_lambda: sum_abs,
        pairing_identity_error: (pp.abs() - half_q).abs().max((pm.abs() - half_q).abs()),
        alpha,
        bellman_drop,
        c_emp,
        degenerate,
        drop_by_depth,
        pairing_plus: pp.abs(),
        pairing_minus: pm.abs(),
        half_quadratic: half_q,
        slack,
        snap_displacement,
        modified_checks: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::DyadicSystem;
    use crate::rng::{rng_from_seed, trial_rng};
    use crate::scalar::Exact;
    use rand::Rng as _;

    fn p2() -> SpaceSpec {
        SpaceSpec::scalar(2.0).unwrap()
    }

    fn pt(f: f64, big_f: f64, g: f64, big_g: f64) -> BellmanPoint<f64> {
        BellmanPoint::new(vec![f], big_f, vec![g], big_g)
    }

    #[test]
    fn tree_from_zero_and_haar() {
        let sys = DyadicSystem::standard(0, 3).unwrap();
        let z = StepFunction::<Exact>::zeros(sys.clone(), 1);
        let t = MartingaleTree::from_functions(&z, &z, DyadicInterval::ROOT, 3, p2()).unwrap();
        assert!(t.generation(2).iter().all(|p| p.matches(&BellmanPoint::zero(1))));
        let h = StepFunction::<Exact>::haar(sys, DyadicInterval::ROOT).unwrap();
        let t = MartingaleTree::from_functions(&h, &z, DyadicInterval::ROOT, 2, p2()).unwrap();
        let root = t.point(DyadicInterval::ROOT);
        assert_eq!(root.f, vec![Exact::from_i64(0)]);
        assert_eq!(root.big_f, Exact::from_i64(1));
        t.verify().unwrap();
    }

    #[test]
    fn trees_satisfy_domain_condition() {
        let sys = DyadicSystem::standard(0, 5).unwrap();
        let space = SpaceSpec::new(3.0, 1.7, 2).unwrap();
        for t in 0..1000 {
            let mut rng = trial_rng(31, t);
            let f = StepFunction::random_uniform(sys.clone(), 2, &mut rng);
            let g = StepFunction::random_uniform(sys.clone(), 2, &mut rng);
            let i0 = DyadicInterval::new(1, (t % 2) as u64);
            let tree = MartingaleTree::from_functions(&f, &g, i0, 3, space).unwrap();
            tree.verify().unwrap();
        }
    }

    #[test]
    fn dynamics_violation_detected() {
        let good = MartingaleTree::from_leaves(p2(), vec![pt(1.0, 1.0, 0.0, 0.0), pt(-1.0, 1.0, 0.0, 0.0)]).unwrap();
        let mut pts = good.points.clone();
        pts[0].f[0] = 0.5;
        assert!(matches!(
            MartingaleTree::from_points(p2(), pts),
            Err(Error::DynamicsViolation { .. })
        ));
        assert!(MartingaleTree::from_leaves(p2(), vec![pt(1.0, 0.5, 0.0, 0.0), pt(0.0, 0.0, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn alpha_zero_is_unperturbed() {
        let leaves = vec![
            pt(0.5, 1.0, 0.2, 0.3),
            pt(-0.25, 0.5, 0.1, 0.4),
            pt(0.0, 0.1, -0.5, 0.5),
            pt(0.3, 0.2, 0.0, 0.0),
        ];
        let tree = MartingaleTree::from_leaves(p2(), leaves).unwrap();
        let m = ModifiedMartingale::new(&tree, &[0.0; 4], 2).unwrap();
        for h in 1..7 {
            assert_eq!(m.theta_plus[h], 0.5);
        }
        for h in 0..7 {
            assert!(m.plus[h].matches(&tree.points[h]));
            assert!(m.minus[h].matches(&tree.points[h]));
        }
        assert!(m.check(&tree).all());
        assert!(ModifiedMartingale::new(&tree, &[0.3, -0.3, 0.0, 0.0], 2).is_err());
        assert!(ModifiedMartingale::new(&tree, &[0.25, 0.0, 0.0, 0.0], 2).is_err());
    }

    #[test]
    fn k1_quarter_alpha() {
        let ex = Exact::from_i64;
        let leaves = vec![
            BellmanPoint::new(vec![ex(3)], ex(9), vec![ex(2)], ex(4)),
            BellmanPoint::new(vec![ex(1)], ex(1), vec![ex(0)], ex(0)),
        ];
        let tree = MartingaleTree::from_leaves(p2(), leaves).unwrap();
        let q = Exact::rational(1, 4);
        let m = ModifiedMartingale::new(&tree, &[q.clone(), -q], 1).unwrap();
        assert_eq!(m.a_plus, vec![Exact::rational(5, 4), Exact::rational(3, 4)]);
        assert_eq!(m.theta_plus[1], Exact::rational(5, 8));
        assert_eq!(m.theta_plus[2], Exact::rational(3, 8));
        assert!(m.check(&tree).all());
    }

    #[test]
    fn modified_invariants_exact() {
        let sys = DyadicSystem::standard(0, 6).unwrap();
        for t in 0..30 {
            let mut rng = trial_rng(77, t);
            let k = 1 + (t % 4) as u32;
            let f = StepFunction::<Exact>::random_integer(sys.clone(), 1, 4, &mut rng);
            let g = StepFunction::<Exact>::random_integer(sys.clone(), 1, 4, &mut rng);
            let tree = MartingaleTree::from_functions(&f, &g, DyadicInterval::ROOT, k, p2()).unwrap();
            // Random balanced α with entries in multiples of 1/16.
            let n = 1usize << k;
            let mut alpha: Vec<Exact> = (0..n / 2)
                .map(|_| Exact::rational(rng.random_range(-4..=4), 16))
                .collect();
            let neg: Vec<Exact> = alpha.iter().map(|a| -a.clone()).collect();
            alpha.extend(neg);
            let m = ModifiedMartingale::new(&tree, &alpha, k).unwrap();
            let checks = m.check(&tree);
            assert!(checks.all(), "{checks:?}");
        }
    }

    #[test]
    fn quadratic_oracle() {
        let q = QuadraticBellman;
        assert_eq!(q.value(0, &pt(0.0, 1.0, 0.0, 1.0)).unwrap(), 4.0);
        assert_eq!(q.value(0, &pt(0.5, 0.25, 0.0, 1.0)).unwrap(), 0.0);
        assert!(q.value(0, &pt(0.5, 0.2, 0.0, 1.0)).is_err());
    }

    #[test]
    fn grid_oracle_examples() {
        let b = GridBellman::new(2.0, 2, 9).unwrap();
        let root = pt(0.0, 1.0, 0.0, 1.0);
        assert_eq!(b.value(0, &root).unwrap(), 0.0);
        assert!((b.value(1, &root).unwrap() - 4.0).abs() < 1e-12);
        // No room to split: F = f², G = g².
        let dirac = pt(0.5, 0.25, -0.5, 0.25);
        for t in 0..=2 {
            assert_eq!(b.value(t, &dirac).unwrap(), 0.0);
        }
        assert!(range_check(4.0, &root, &p2()).unwrap());
        assert!(range_check(0.0, &root, &p2()).unwrap());
        assert!(!range_check(-1e-9, &root, &p2()).unwrap());
        assert!(GridBellman::new(2.0, 2, 8).is_err());
        assert!(b.value(1, &pt(0.5, 0.2, 0.0, 1.0)).is_err());
    }

    #[test]
    fn grid_oracle_bounded_by_quadratic_and_monotone() {
        let b = GridBellman::new(2.0, 3, 9).unwrap();
        let q = QuadraticBellman;
        let r = b.resolution();
        for s in 0..r.pow(4) {
            let idx = [s / (r * r * r), (s / (r * r)) % r, (s / r) % r, s % r];
            if !b.is_valid(idx) {
                continue;
            }
            let exact = q.value(0, &b.point_at(idx)).unwrap();
            for t in 0..3 {
                assert!(b.grid_value(t, idx) <= b.grid_value(t + 1, idx));
            }
            assert!(b.grid_value(3, idx) <= exact + 1e-9);
            assert!(range_check(b.grid_value(3, idx), &b.point_at(idx), &p2()).unwrap());
        }
        let fine = GridBellman::new(2.0, 2, 17).unwrap();
        for s in 0..r.pow(4) {
            let idx = [s / (r * r * r), (s / (r * r)) % r, (s / r) % r, s % r];
            if b.is_valid(idx) {
                let fidx = idx.map(|c| 2 * c);
                assert!(b.grid_value(2, idx) <= fine.grid_value(2, fidx) + 1e-12);
            }
        }
    }

    #[test]
    fn concavity_examples() {
        let b = GridBellman::new(2.0, 2, 9).unwrap();
        let rep = concavity_gain_check(&b, 0, &pt(1.0, 1.0, 1.0, 1.0), &pt(-1.0, 1.0, -1.0, 1.0)).unwrap();
        assert!((rep.gain - 4.0).abs() < 1e-12);
        assert!((rep.lhs - 4.0).abs() < 1e-12);
        assert_eq!(rep.snap_displacement, 0.0);
        let a = pt(0.25, 0.5, 0.0, 0.5);
        let same = concavity_gain_check(&b, 1, &a, &a).unwrap();
        assert_eq!(same.gain, 0.0);
        assert!(same.slack >= 0.0);
        let mut rng = rng_from_seed(1);
        for _ in 0..50 {
            let mut draw = || {
                let f: f64 = rng.random_range(-0.9..0.9);
                let g: f64 = rng.random_range(-0.9..0.9);
                pt(f, rng.random_range(f * f..=1.0), g, rng.random_range(g * g..=1.0))
            };
            let (x, y) = (draw(), draw());
            assert!(concavity_gain_check(&b, 1, &x, &y).unwrap().slack >= 0.0);
        }
    }

    #[test]
    fn lemma_pipeline_k1() {
        let sys = DyadicSystem::standard(0, 1).unwrap();
        let f = StepFunction::scalar(sys.clone(), vec![3.0, 1.0]).unwrap();
        let g = StepFunction::scalar(sys, vec![2.0, 0.0]).unwrap();
        let tree = MartingaleTree::from_functions(&f, &g, DyadicInterval::ROOT, 1, p2()).unwrap();
        let rep = lemma51_verify(&tree, 1, &QuadraticBellman, 3, None, 1.783).unwrap();
        assert!((rep.sum_abs_lambda - 2.0).abs() < 1e-12);
        assert!(rep.alpha.passes);
        assert!(rep.pairing_identity_error < 1e-12);
        assert!(rep.modified_checks.all());
        // Leaves sit on the domain boundary, so the exact drop is 𝓑(A_{I₀}) = 4.
        assert!((rep.bellman_drop - 4.0).abs() < 1e-12);
        assert!(rep.slack >= -1e-12);
        let grid = GridBellman::new(2.0, 3, 17).unwrap();
        let rep = lemma51_verify(&tree, 1, &grid, 3, Some(&grid), 1.783).unwrap();
        assert!(rep.c_emp.is_some());
        let c = StepFunction::constant(DyadicSystem::standard(0, 1).unwrap(), &[1.0]);
        let tree = MartingaleTree::from_functions(&c, &c, DyadicInterval::ROOT, 1, p2()).unwrap();
        let rep = lemma51_verify(&tree, 1, &QuadraticBellman, 3, None, 1.783).unwrap();
        assert!(rep.degenerate);
        assert_eq!(rep.sum_abs_lambda, 0.0);
    }
}
