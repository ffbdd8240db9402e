//! Finite dyadic windows of standard and randomly translated dyadic systems.
//!
//! A window is one root interval `[origin, origin + 2^M)` of a dyadic system
//! together with its descendants down to `D` generations.  Endpoints are held
//! as integer multiples of the leaf width `2^{-j_max}` (with `j_max = -M + D`),
//! so measure additivity and nesting are checked without rounding.
//!
//! The level-`j` grid of the system `𝒟^ω` is the standard grid translated by
//! `Σ_{i>j} 2^{-i} ω_i`.  Only the bits `ω_i` with `j_min < i <= j_max` move
//! intervals of the window relative to one another; translations from finer
//! levels are a common offset and are folded into the origin.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Address of an interval inside a window: `generation` levels below the
/// root, `index`-th from the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DyadicInterval {
    pub generation: u32,
    pub index: u64,
}

impl DyadicInterval {
    pub const ROOT: DyadicInterval = DyadicInterval {
        generation: 0,
        index: 0,
    };

    pub fn new(generation: u32, index: u64) -> Self {
        Self { generation, index }
    }

    /// Left child `I^+`.
    pub fn left(self) -> Self {
        Self::new(self.generation + 1, 2 * self.index)
    }

    /// Right child `I^-`.
    pub fn right(self) -> Self {
        Self::new(self.generation + 1, 2 * self.index + 1)
    }

    pub fn parent(self) -> Option<Self> {
        (self.generation > 0).then(|| Self::new(self.generation - 1, self.index / 2))
    }

    /// Ancestor at generation `g <= self.generation`.
    pub fn ancestor(self, g: u32) -> Self {
        debug_assert!(g <= self.generation);
        Self::new(g, self.index >> (self.generation - g))
    }

    pub fn contains(self, other: Self) -> bool {
        other.generation >= self.generation && other.index >> (other.generation - self.generation) == self.index
    }

    /// Position in breadth-first (heap) order: `2^g - 1 + index`.
    pub fn heap_index(self) -> usize {
        (1usize << self.generation) - 1 + self.index as usize
    }

    pub fn from_heap_index(h: usize) -> Self {
        let generation = (usize::BITS - (h + 1).leading_zeros() - 1) as u32;
        Self::new(generation, (h + 1 - (1usize << generation)) as u64)
    }

    /// Indices (relative to generation `self.generation + n`) of `𝒟_n(self)`.
    pub fn descendant_indices(self, n: u32) -> Range<u64> {
        let start = self.index << n;
        start..start + (1u64 << n)
    }

    pub fn as_pair(self) -> (u32, u64) {
        (self.generation, self.index)
    }
}

/// One window of a (possibly translated) dyadic system.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DyadicSystem {
    root_level: i32,
    depth: u32,
    base: i64,
    omega: Vec<bool>,
}

/// Upper bound on window depth; leaf offsets must fit in `i64`.
pub const MAX_DEPTH: u32 = 40;

impl DyadicSystem {
    /// Standard system, window `[0, 2^M)` with `depth` generations.
    pub fn standard(log_len: i32, depth: u32) -> Result<Self> {
        Self::with_omega(-log_len, depth, 0, vec![false; depth as usize])
    }

    /// Window whose root is the `base`-th level-`root_level` interval of the
    /// system with bits `omega[t] = ω_{root_level + 1 + t}`.
    pub fn with_omega(root_level: i32, depth: u32, base: i64, omega: Vec<bool>) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::InvalidParameter(format!(
                "window depth {depth} exceeds {MAX_DEPTH}"
            )));
        }
        if omega.len() != depth as usize {
            return Err(Error::DimensionMismatch {
                expected: depth as usize,
                found: omega.len(),
            });
        }
        Ok(Self {
            root_level,
            depth,
            base,
            omega,
        })
    }

    /// Random system with independent fair bits `ω_i`, `j_min < i <= j_max`;
    /// the window is the `base`-th root interval at level `j_min`.
    pub fn sample(seed: u64, j_min: i32, j_max: i32, base: i64) -> Result<Self> {
        if j_min > j_max {
            return Err(Error::InvalidParameter(format!(
                "j_min = {j_min} exceeds j_max = {j_max}"
            )));
        }
        let depth = (j_max - j_min) as u32;
        let mut rng = rng_from_seed(seed);
        let omega = (0..depth).map(|_| rng.random::<bool>()).collect();
        Self::with_omega(j_min, depth, base, omega)
    }

    /// Window exponent `M`: the root has length `2^M`.
    pub fn log_len(&self) -> i32 {
        -self.root_level
    }

    pub fn root_level(&self) -> i32 {
        self.root_level
    }

    pub fn leaf_level(&self) -> i32 {
        self.root_level + self.depth as i32
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn base(&self) -> i64 {
        self.base
    }

    /// `ω_i` for `i = root_level + 1 ..= leaf_level`.
    pub fn omega(&self) -> &[bool] {
        &self.omega
    }

    pub fn omega_at(&self, level: i32) -> bool {
        let t = level - self.root_level - 1;
        t >= 0 && (t as u32) < self.depth && self.omega[t as usize]
    }

    pub fn leaf_count(&self) -> usize {
        1usize << self.depth
    }

    pub fn non_leaf_count(&self) -> usize {
        self.leaf_count() - 1
    }

    /// Windows agree on scale and depth (leaf grids can be compared).
    pub fn same_shape(&self, other: &DyadicSystem) -> bool {
        self.root_level == other.root_level && self.depth == other.depth
    }

    /// Adjacent root interval of the same system, `offset` roots to the right.
    pub fn neighbor(&self, offset: i64) -> DyadicSystem {
        DyadicSystem {
            base: self.base + offset,
            ..self.clone()
        }
    }

    /// Truncated translation `Σ_{j<i<=j_max} 2^{-i} ω_i` of the level-`j`
    /// grid, in leaf-width units.
    pub fn translation_units(&self, level: i32) -> i64 {
        let top = self.leaf_level();
        ((level + 1).max(self.root_level + 1)..=top)
            .filter(|&i| self.omega_at(i))
            .map(|i| 1i64 << (top - i))
            .sum()
    }

    /// Left endpoint of the root in leaf-width units.
    pub fn origin_units(&self) -> i64 {
        (self.base << self.depth) + self.translation_units(self.root_level)
    }

    /// Real left endpoint of the root.
    pub fn origin(&self) -> f64 {
        self.origin_units() as f64 * self.leaf_width()
    }

    pub fn leaf_width(&self) -> f64 {
        2f64.powi(-self.leaf_level())
    }

    pub fn level_of(&self, interval: DyadicInterval) -> i32 {
        self.root_level + interval.generation as i32
    }

    pub fn check(&self, interval: DyadicInterval) -> Result<()> {
        if interval.generation > self.depth || interval.index >= 1u64 << interval.generation {
            return Err(Error::OutsideWindow {
                generation: interval.generation,
                index: interval.index,
            });
        }
        Ok(())
    }

    /// `[left, right)` in leaf-width units.
    pub fn interval_units(&self, interval: DyadicInterval) -> Result<(i64, i64)> {
        self.check(interval)?;
        let width = 1i64 << (self.depth - interval.generation);
        let left = self.origin_units() + interval.index as i64 * width;
        Ok((left, left + width))
    }

    pub fn endpoints(&self, interval: DyadicInterval) -> Result<(f64, f64)> {
        let (l, r) = self.interval_units(interval)?;
        let w = self.leaf_width();
        Ok((l as f64 * w, r as f64 * w))
    }

    /// `log2 |I|`.
    pub fn log_length(&self, interval: DyadicInterval) -> i32 {
        self.log_len() - interval.generation as i32
    }

    /// `(I^+, I^-)`, left child first.
    pub fn children(&self, interval: DyadicInterval) -> Result<(DyadicInterval, DyadicInterval)> {
        self.check(interval)?;
        if interval.generation == self.depth {
            return Err(Error::DepthExhausted {
                generation: interval.generation,
                requested: 1,
                depth: self.depth,
            });
        }
        Ok((interval.left(), interval.right()))
    }

    /// `𝒟_n(I)` in left-to-right order.
    pub fn descendants(&self, interval: DyadicInterval, n: u32) -> Result<Vec<DyadicInterval>> {
        self.check(interval)?;
        if interval.generation + n > self.depth {
            return Err(Error::DepthExhausted {
                generation: interval.generation,
                requested: n,
                depth: self.depth,
            });
        }
        let g = interval.generation + n;
        Ok(interval
            .descendant_indices(n)
            .map(|i| DyadicInterval::new(g, i))
            .collect())
    }

    pub fn parent(&self, interval: DyadicInterval) -> Option<DyadicInterval> {
        interval.parent()
    }

    /// Leaf cells covered by `interval`.
    pub fn leaf_range(&self, interval: DyadicInterval) -> Range<usize> {
        let width = 1usize << (self.depth - interval.generation);
        let start = interval.index as usize * width;
        start..start + width
    }

    pub fn intervals_at(&self, generation: u32) -> impl Iterator<Item = DyadicInterval> {
        (0..1u64 << generation).map(move |i| DyadicInterval::new(generation, i))
    }

    /// All intervals strictly above the leaf level, in heap order.
    pub fn non_leaf_intervals(&self) -> impl Iterator<Item = DyadicInterval> {
        (0..self.non_leaf_count()).map(DyadicInterval::from_heap_index)
    }
}

#[derive(Serialize, Deserialize)]
struct SystemRecord {
    origin: f64,
    #[serde(rename = "M")]
    log_len: i32,
    #[serde(rename = "D")]
    depth: u32,
    omega_bits: Vec<u8>,
}

impl Serialize for DyadicSystem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SystemRecord {
            origin: self.origin(),
            log_len: self.log_len(),
            depth: self.depth,
            omega_bits: self.omega.iter().map(|&b| b as u8).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DyadicSystem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = SystemRecord::deserialize(d)?;
        if rec.omega_bits.iter().any(|&b| b > 1) {
            return Err(D::Error::custom("omega bits must be 0 or 1"));
        }
        let omega = rec.omega_bits.iter().map(|&b| b == 1).collect();
        let mut sys = DyadicSystem::with_omega(-rec.log_len, rec.depth, 0, omega).map_err(D::Error::custom)?;
        let units = rec.origin / sys.leaf_width();
        if units.fract() != 0.0 || !units.is_finite() {
            return Err(D::Error::custom("origin is not on the leaf grid"));
        }
        let rest = units as i64 - sys.translation_units(sys.root_level);
        if rest.rem_euclid(1i64 << sys.depth) != 0 {
            return Err(D::Error::custom(
                "origin inconsistent with omega bits and window length",
            ));
        }
        sys.base = rest >> sys.depth;
        Ok(sys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_window(depth: u32) -> DyadicSystem {
        DyadicSystem::standard(0, depth).unwrap()
    }

    #[test]
    fn children_bisect() {
        let sys = unit_window(3);
        let (l, r) = sys.children(DyadicInterval::ROOT).unwrap();
        assert_eq!(sys.endpoints(l).unwrap(), (0.0, 0.5));
        assert_eq!(sys.endpoints(r).unwrap(), (0.5, 1.0));
        let (ll, lr) = sys.children(r).unwrap();
        assert_eq!(sys.endpoints(ll).unwrap(), (0.5, 0.75));
        assert_eq!(sys.endpoints(lr).unwrap(), (0.75, 1.0));
        assert_eq!(sys.parent(ll), Some(r));
        assert_eq!(sys.parent(lr), Some(r));
    }

    #[test]
    fn leaf_has_no_children() {
        let sys = unit_window(2);
        let leaf = DyadicInterval::new(2, 3);
        assert!(matches!(sys.children(leaf), Err(Error::DepthExhausted { .. })));
        assert!(matches!(
            sys.children(DyadicInterval::new(3, 0)),
            Err(Error::OutsideWindow { .. })
        ));
    }

    #[test]
    fn descendants_partition() {
        let sys = unit_window(6);
        assert_eq!(
            sys.descendants(DyadicInterval::ROOT, 0).unwrap(),
            vec![DyadicInterval::ROOT]
        );
        let quarters: Vec<_> = sys
            .descendants(DyadicInterval::ROOT, 2)
            .unwrap()
            .into_iter()
            .map(|i| sys.endpoints(i).unwrap())
            .collect();
        assert_eq!(quarters, vec![(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)]);
        assert_eq!(sys.descendants(DyadicInterval::ROOT, 5).unwrap().len(), 32);
        assert!(sys.descendants(DyadicInterval::new(2, 1), 5).is_err());
    }

    #[test]
    fn zero_bits_give_standard_grid() {
        let sys = DyadicSystem::with_omega(0, 4, 3, vec![false; 4]).unwrap();
        assert_eq!(sys.endpoints(DyadicInterval::ROOT).unwrap(), (3.0, 4.0));
        for g in 0..=4 {
            assert_eq!(sys.translation_units(sys.root_level() + g), 0);
        }
    }

    #[test]
    fn single_bit_translates_coarse_level() {
        // Only ω_1 = 1: level-0 grid moves by 1/2, level >= 1 grids are standard.
        let sys = DyadicSystem::with_omega(0, 3, 0, vec![true, false, false]).unwrap();
        assert_eq!(sys.endpoints(DyadicInterval::ROOT).unwrap(), (0.5, 1.5));
        assert_eq!(sys.translation_units(1), 0);
        let (l, _) = sys.children(DyadicInterval::ROOT).unwrap();
        assert_eq!(sys.endpoints(l).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = DyadicSystem::sample(11, -2, 6, 0).unwrap();
        let b = DyadicSystem::sample(11, -2, 6, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.depth(), 8);
        assert!(DyadicSystem::sample(1, 3, 2, 0).is_err());
    }

    #[test]
    fn heap_index_round_trip() {
        for h in 0..200 {
            assert_eq!(DyadicInterval::from_heap_index(h).heap_index(), h);
        }
        assert_eq!(DyadicInterval::new(3, 5).ancestor(1), DyadicInterval::new(1, 1));
        assert!(DyadicInterval::new(1, 1).contains(DyadicInterval::new(3, 5)));
        assert!(!DyadicInterval::new(1, 0).contains(DyadicInterval::new(3, 5)));
    }

    #[test]
    fn json_round_trip() {
        let sys = DyadicSystem::sample(5, -1, 5, -3).unwrap();
        let json = serde_json::to_value(&sys).unwrap();
        assert_eq!(json["M"], 1);
        assert_eq!(json["D"], 6);
        assert_eq!(json["omega_bits"].as_array().unwrap().len(), 6);
        let back: DyadicSystem = serde_json::from_value(json).unwrap();
        assert_eq!(back, sys);
    }
}
