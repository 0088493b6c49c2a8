//! The exponential partition of the singular neighbourhood.
//!
//! `Δ0 = (-δ, δ)` with `δ = e^{-r0}` is cut into levels
//! `I_r = [e^{-(r+1)}, e^{-r})` for `r >= r0` and their mirrors
//! `I_{-r} = (-e^{-r}, -e^{-(r+1)}]`. Each level is divided into `|r|^ϑ`
//! equal cells, numbered `m = 1..` moving away from 0 on both sides.

use crate::error::{Error, Result};
use crate::kv::KvBlock;

/// Largest `ϑ` for which `|r|^ϑ` fits a `u64` at every representable depth.
pub const MAX_THETA: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || lo < -0.5 || hi > 0.5 {
            return Err(Error::Precondition(format!("[{lo}, {hi}] is not a subinterval of I")));
        }
        Ok(Self { lo, hi })
    }

    /// No validation; used for images that may be degenerate.
    pub const fn raw(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// True if 0 lies strictly inside.
    pub fn straddles_zero(&self) -> bool {
        self.lo < 0.0 && self.hi > 0.0
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub r: i64,
    pub m: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classification {
    Free,
    Inessential,
    Essential,
    Escape,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionConfig {
    pub r0: u32,
    pub r_star: u32,
    pub alpha: f64,
    pub theta: u32,
}

impl PartitionConfig {
    pub fn new(r0: u32, r_star: u32, alpha: f64) -> Result<Self> {
        if r0 < 2 {
            return Err(Error::Config(format!("r0 = {r0} must be at least 2")));
        }
        if r_star <= r0 {
            return Err(Error::Config(format!("r_star = {r_star} must exceed r0 = {r0}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {alpha} must lie in (0, 1)")));
        }
        let theta = (1.0 / alpha).floor() as u32 + 1;
        if theta > MAX_THETA {
            return Err(Error::Config(format!(
                "alpha = {alpha} gives theta = {theta}; at most {MAX_THETA} is supported"
            )));
        }
        Ok(Self { r0, r_star, alpha, theta })
    }

    pub fn delta(&self) -> f64 {
        (-(self.r0 as f64)).exp()
    }

    pub fn delta_star(&self) -> f64 {
        (-(self.r_star as f64)).exp()
    }

    pub fn delta0(&self) -> Interval {
        Interval::raw(-self.delta(), self.delta())
    }

    pub fn delta_star_interval(&self) -> Interval {
        Interval::raw(-self.delta_star(), self.delta_star())
    }

    /// `J ∩ Δ0 ≠ ∅` for the open `Δ0`.
    pub fn meets_delta0(&self, j: &Interval) -> bool {
        let d = self.delta();
        j.lo < d && j.hi > -d
    }

    pub fn cells_per_level(&self, r: u64) -> u64 {
        r.saturating_pow(self.theta)
    }

    /// Boundary `j` (0..=N) of level `r > 0` on the positive side.
    /// Boundary `N` is exactly `e^{-r}`.
    pub fn boundary(&self, r: u64, j: u64) -> f64 {
        let n = self.cells_per_level(r);
        let lo = (-((r + 1) as f64)).exp();
        let hi = (-(r as f64)).exp();
        if j >= n {
            hi
        } else {
            lo + j as f64 * ((hi - lo) / n as f64)
        }
    }

    fn level_of_abs(&self, ax: f64) -> u64 {
        let mut r = (-ax.ln()).floor().max(0.0) as u64;
        while r > 0 && ax >= (-(r as f64)).exp() {
            r -= 1;
        }
        while ax < (-((r + 1) as f64)).exp() {
            r += 1;
        }
        r
    }

    /// Zero-based cell index of `ax` within positive level `r`.
    fn index_in_level(&self, ax: f64, r: u64) -> u64 {
        let n = self.cells_per_level(r);
        let lo = self.boundary(r, 0);
        let w = self.boundary(r, 1) - lo;
        let mut j = (((ax - lo) / w).floor().max(0.0) as u64).min(n - 1);
        while j > 0 && ax < self.boundary(r, j) {
            j -= 1;
        }
        while j + 1 < n && ax >= self.boundary(r, j + 1) {
            j += 1;
        }
        j
    }

    pub fn cell_of(&self, x: f64) -> Result<CellId> {
        if x == 0.0 {
            return Err(Error::Singularity(x));
        }
        let ax = x.abs();
        if ax >= self.delta() {
            return Err(Error::OutsideDelta0(x));
        }
        let r = self.level_of_abs(ax);
        let m = self.index_in_level(ax, r) + 1;
        let r = r as i64;
        Ok(CellId { r: if x > 0.0 { r } else { -r }, m })
    }

    pub fn interval_of(&self, id: CellId) -> Result<Interval> {
        let ar = id.r.unsigned_abs();
        if ar < self.r0 as u64 {
            return Err(Error::EmptyCell(id.r));
        }
        if id.m == 0 || id.m > self.cells_per_level(ar) {
            return Err(Error::CellIndex { r: id.r, m: id.m });
        }
        let a = self.boundary(ar, id.m - 1);
        let b = self.boundary(ar, id.m);
        Ok(if id.r > 0 { Interval::raw(a, b) } else { Interval::raw(-b, -a) })
    }

    /// Cell containing the positive number `ax` approached from above,
    /// i.e. the cell whose interior meets `(ax - ε, ax)`.
    fn cell_left_of_abs(&self, ax: f64) -> (u64, u64) {
        let r = self.level_of_abs(ax);
        let j = self.index_in_level(ax, r);
        if ax == self.boundary(r, j) {
            if j > 0 {
                (r, j - 1)
            } else {
                (r + 1, self.cells_per_level(r + 1) - 1)
            }
        } else {
            (r, j)
        }
    }

    /// Linear rank of a positive cell counted from the outer edge of Δ0
    /// inward, saturating. Only differences of nearby ranks are used.
    fn cells_between(&self, outer: (u64, u64), inner: (u64, u64)) -> u64 {
        // both (level, zero-based index); outer has the smaller level
        if outer.0 == inner.0 {
            return outer.1 - inner.1 + 1;
        }
        let mut total = (outer.1 + 1).saturating_add(self.cells_per_level(inner.0) - inner.1);
        for r in outer.0 + 1..inner.0 {
            total = total.saturating_add(self.cells_per_level(r));
            if total == u64::MAX {
                break;
            }
        }
        total
    }

    /// Number of cells whose interior meets the open interval `(lo, hi)`
    /// clipped to Δ0. Saturates; `u64::MAX` if the interval reaches 0.
    pub fn span_count(&self, j: &Interval) -> u64 {
        let d = self.delta();
        let lo = j.lo.max(-d);
        let hi = j.hi.min(d);
        if !(lo < hi) {
            return 0;
        }
        if lo < 0.0 && hi > 0.0 || lo == 0.0 || hi == 0.0 {
            return u64::MAX;
        }
        let (inner, outer) = if lo > 0.0 { (lo, hi) } else { (-hi, -lo) };
        let inner_cell = {
            let r = self.level_of_abs(inner);
            (r, self.index_in_level(inner, r))
        };
        let outer_cell = if outer >= d {
            let r = self.r0 as u64;
            (r, self.cells_per_level(r) - 1)
        } else {
            self.cell_left_of_abs(outer)
        };
        self.cells_between(outer_cell, inner_cell)
    }

    /// Cells whose interior meets `J ∩ Δ0`, ordered from left to right.
    pub fn spanned_cells(&self, j: &Interval) -> Result<Vec<CellId>> {
        if j.straddles_zero() {
            return Err(Error::Straddle(j.lo, j.hi));
        }
        let count = self.span_count(j);
        if count == 0 {
            return Ok(Vec::new());
        }
        if count > 10_000_000 {
            return Err(Error::Precondition(format!("interval spans {count} cells")));
        }
        let d = self.delta();
        let positive = j.lo >= 0.0;
        let (inner, outer) = if positive { (j.lo, j.hi.min(d)) } else { (-j.hi, (-j.lo).min(d)) };
        let mut cells = Vec::with_capacity(count as usize);
        let mut r = self.level_of_abs(inner);
        let mut idx = self.index_in_level(inner, r);
        let outer_cell = if outer >= d {
            let r0 = self.r0 as u64;
            (r0, self.cells_per_level(r0) - 1)
        } else {
            self.cell_left_of_abs(outer)
        };
        loop {
            cells.push((r, idx));
            if (r, idx) == outer_cell {
                break;
            }
            if idx + 1 < self.cells_per_level(r) {
                idx += 1;
            } else {
                r -= 1;
                idx = 0;
            }
        }
        let mut out: Vec<CellId> = cells
            .into_iter()
            .map(|(r, i)| CellId { r: if positive { r as i64 } else { -(r as i64) }, m: i + 1 })
            .collect();
        if !positive {
            out.reverse();
        }
        Ok(out)
    }

    /// Smallest `|r|` among the levels that `J` meets inside Δ0.
    pub fn depth(&self, j: &Interval) -> Option<u64> {
        if !self.meets_delta0(j) {
            return None;
        }
        let d = self.delta();
        let far = if j.hi <= 0.0 {
            -j.lo
        } else if j.lo >= 0.0 {
            j.hi
        } else {
            j.hi.max(-j.lo)
        };
        if far >= d {
            return Some(self.r0 as u64);
        }
        Some(self.cell_left_of_abs(far).0)
    }

    pub fn classify(&self, j: &Interval) -> Classification {
        let long = j.len() >= self.delta();
        if !self.meets_delta0(j) {
            return if long { Classification::Escape } else { Classification::Free };
        }
        if !long && self.span_count(j) <= 3 {
            Classification::Inessential
        } else {
            Classification::Essential
        }
    }

    pub fn to_kv(&self) -> KvBlock {
        let mut kv = KvBlock::new();
        kv.set("r0", self.r0);
        kv.set("r_star", self.r_star);
        kv.set_f64("alpha", self.alpha);
        kv
    }

    pub fn from_kv(kv: &KvBlock) -> Result<Self> {
        Self::new(kv.require("r0")?, kv.require("r_star")?, kv.require("alpha")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> PartitionConfig {
        PartitionConfig::new(3, 6, 0.45).unwrap()
    }

    fn brute_m(ax: f64, r: u64, n: u64) -> u64 {
        let lo = (-((r + 1) as f64)).exp();
        let hi = (-(r as f64)).exp();
        let w = (hi - lo) / n as f64;
        (1..=n).find(|&m| ax < lo + m as f64 * w || m == n).unwrap()
    }

    #[test]
    fn config_derives_theta_and_radii() {
        let c = cfg();
        assert_eq!(c.theta, 3);
        assert!((c.delta() - (-3f64).exp()).abs() < 1e-16);
        assert!(c.delta_star() < c.delta());
        assert!(PartitionConfig::new(3, 3, 0.45).is_err());
        assert!(PartitionConfig::new(1, 6, 0.45).is_err());
        assert!(PartitionConfig::new(3, 6, 1.0).is_err());
    }

    #[test]
    fn cell_of_examples() {
        let c = cfg();
        let x = (-5.5f64).exp();
        let id = c.cell_of(x).unwrap();
        assert_eq!(id.r, 5);
        assert_eq!(id.m, brute_m(x, 5, 125));

        let id = c.cell_of(0.01).unwrap();
        assert_eq!(id, CellId { r: 4, m: 19 });
        assert_eq!(brute_m(0.01, 4, 64), 19);

        let id = c.cell_of(-(-4f64).exp() * (1.0 - 1e-12)).unwrap();
        assert_eq!(id, CellId { r: -4, m: 64 });

        assert!(matches!(c.cell_of(0.0), Err(Error::Singularity(_))));
        assert!(matches!(c.cell_of(0.06), Err(Error::OutsideDelta0(_))));
    }

    #[test]
    fn interval_of_examples() {
        let c = cfg();
        let j = c.interval_of(CellId { r: 4, m: 1 }).unwrap();
        let e4 = (-4f64).exp();
        let e5 = (-5f64).exp();
        assert_eq!(j.lo, e5);
        assert!((j.hi - (e5 + (e4 - e5) / 64.0)).abs() < 1e-17);
        assert!(matches!(c.interval_of(CellId { r: 2, m: 1 }), Err(Error::EmptyCell(2))));
        assert!(c.interval_of(CellId { r: 4, m: 65 }).is_err());
        let last = c.interval_of(CellId { r: 4, m: 64 }).unwrap();
        assert_eq!(last.hi, e4);
        let neg = c.interval_of(CellId { r: -4, m: 64 }).unwrap();
        assert_eq!((neg.lo, neg.hi), (-e4, -last.lo));
    }

    #[test]
    fn cells_tile_each_level() {
        let c = cfg();
        for r in 3..=12u64 {
            let n = c.cells_per_level(r);
            let mut total = 0.0;
            let w0 = c.interval_of(CellId { r: r as i64, m: 1 }).unwrap().len();
            for m in 1..=n {
                let j = c.interval_of(CellId { r: r as i64, m }).unwrap();
                if m > 1 {
                    let prev = c.interval_of(CellId { r: r as i64, m: m - 1 }).unwrap();
                    assert_eq!(prev.hi, j.lo);
                }
                assert!((j.len() - w0).abs() <= 1e-12 * w0 * 16.0);
                total += j.len();
            }
            let level = (-(r as f64)).exp() - (-((r + 1) as f64)).exp();
            assert!((total - level).abs() < 1e-12 * level);
        }
    }

    #[test]
    fn spanned_cells_examples() {
        let c = cfg();
        let cell = c.interval_of(CellId { r: 4, m: 2 }).unwrap();
        assert_eq!(c.spanned_cells(&cell).unwrap(), vec![CellId { r: 4, m: 2 }]);

        let level = Interval::raw((-5f64).exp(), (-4f64).exp());
        let cells = c.spanned_cells(&level).unwrap();
        assert_eq!(cells.len(), 64);
        assert_eq!(c.span_count(&level), 64);

        let inner = Interval::raw(cell.lo + 0.25 * cell.len(), cell.lo + 0.5 * cell.len());
        assert_eq!(c.spanned_cells(&inner).unwrap().len(), 1);

        assert!(matches!(c.spanned_cells(&Interval::raw(-0.001, 0.001)), Err(Error::Straddle(..))));
        assert_eq!(c.span_count(&Interval::raw(0.0, 0.001)), u64::MAX);
    }

    #[test]
    fn spans_across_level_boundaries() {
        let c = cfg();
        let a = c.interval_of(CellId { r: 5, m: 125 }).unwrap();
        let b = c.interval_of(CellId { r: 4, m: 1 }).unwrap();
        let j = Interval::raw(a.mid(), b.mid());
        let cells = c.spanned_cells(&j).unwrap();
        assert_eq!(cells, vec![CellId { r: 5, m: 125 }, CellId { r: 4, m: 1 }]);
        assert_eq!(c.span_count(&j), 2);
        let neg = Interval::raw(-b.mid(), -a.mid());
        assert_eq!(c.spanned_cells(&neg).unwrap(), vec![CellId { r: -4, m: 1 }, CellId { r: -5, m: 125 }]);
        assert_eq!(c.classify(&j), Classification::Inessential);
    }

    #[test]
    fn classify_examples() {
        let c = cfg();
        let d = c.delta();
        assert_eq!(c.classify(&Interval::raw(0.3, 0.3 + d / 2.0)), Classification::Free);
        assert_eq!(c.classify(&Interval::raw(0.1, 0.1 + d)), Classification::Escape);
        let level = Interval::raw((-5f64).exp(), (-4f64).exp());
        assert_eq!(c.classify(&level), Classification::Essential);
        assert_eq!(c.classify(&Interval::raw(-0.2, 0.2)), Classification::Essential);
    }

    #[test]
    fn depth_is_shallowest_level() {
        let c = cfg();
        let a = c.interval_of(CellId { r: 7, m: 3 }).unwrap();
        let b = c.interval_of(CellId { r: 5, m: 3 }).unwrap();
        assert_eq!(c.depth(&Interval::raw(a.lo, b.mid())), Some(5));
        assert_eq!(c.depth(&Interval::raw(-b.mid(), a.mid())), Some(5));
        assert_eq!(c.depth(&Interval::raw(0.2, 0.3)), None);
        assert_eq!(c.depth(&Interval::raw(0.01, 0.2)), Some(3));
    }

    proptest! {
        #[test]
        fn midpoint_round_trip(r in 3i64..=60, frac in 0.0f64..1.0, neg in any::<bool>()) {
            let c = cfg();
            let n = c.cells_per_level(r as u64);
            let m = ((frac * n as f64) as u64).min(n - 1) + 1;
            let id = CellId { r: if neg { -r } else { r }, m };
            let j = c.interval_of(id).unwrap();
            prop_assert_eq!(c.cell_of(j.mid()).unwrap(), id);
        }

        #[test]
        fn cell_contains_its_point(x in 1e-200f64..0.0497, neg in any::<bool>()) {
            let c = cfg();
            let x = if neg { -x } else { x };
            let j = c.interval_of(c.cell_of(x).unwrap()).unwrap();
            if neg { prop_assert!(j.lo < x && x <= j.hi); } else { prop_assert!(j.lo <= x && x < j.hi); }
        }

        #[test]
        fn classify_is_exhaustive(lo in -0.5f64..0.5, len in 1e-9f64..0.3) {
            let c = cfg();
            let j = Interval::raw(lo, (lo + len).min(0.5));
            prop_assume!(j.lo < j.hi);
            let k = c.classify(&j);
            let meets = c.meets_delta0(&j);
            let long = j.len() >= c.delta();
            let few = c.span_count(&j) <= 3;
            let expect = match (meets, long) {
                (false, false) => Classification::Free,
                (false, true) => Classification::Escape,
                (true, false) if few => Classification::Inessential,
                _ => Classification::Essential,
            };
            prop_assert_eq!(k, expect);
        }

        #[test]
        fn span_count_matches_list(a in 1e-6f64..0.0497, b in 1e-6f64..0.0497) {
            let c = cfg();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(lo < hi);
            let j = Interval::raw(lo, hi);
            let n = c.span_count(&j);
            prop_assume!(n < 200_000);
            prop_assert_eq!(c.spanned_cells(&j).unwrap().len() as u64, n);
        }
    }
}
