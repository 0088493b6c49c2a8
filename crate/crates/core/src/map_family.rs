//! The default family of Lorenz-like maps on `I = [-1/2, 1/2]`
//!
//! ```text
//! T(x) = sign(x) * (a |x|^λ - 1/2),     x ≠ 0
//! ```
//!
//! Both branches are increasing, `T(0+) = -1/2` and `T(0-) = +1/2`, and the
//! derivative `a λ |x|^{λ-1}` blows up at the singularity with exact order
//! `λ - 1`. At `λ = 1, a = 2` the map is the piecewise linear doubling map
//! `2x ∓ 1/2`, which preserves Lebesgue measure and serves as the analytic
//! calibration case for everything downstream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvBlock;

/// Tolerance used when checking `a <= 2^λ` and `α >= 1 - λ`.
const PARAM_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Left,
    Right,
}

impl Branch {
    pub fn of(x: f64) -> Branch {
        if x < 0.0 {
            Branch::Left
        } else {
            Branch::Right
        }
    }
}

/// One member `T_λ` of the family together with its regularity constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapParams {
    /// Singularity exponent λ in (0, 1].
    pub lambda: f64,
    /// Scale, `1 < a <= 2^λ`.
    pub a: f64,
    /// Hölder exponent α in (0, 1), at least `1 - λ`.
    pub alpha: f64,
    /// Order-of-singularity constant C.
    pub c_order: f64,
    /// Hölder constant K of `1/DT`.
    pub k_holder: f64,
}

impl MapParams {
    pub fn new(lambda: f64, a: f64, alpha: f64, c_order: f64, k_holder: f64) -> Result<Self> {
        let p = Self { lambda, a, alpha, c_order, k_holder };
        p.validate()?;
        Ok(p)
    }

    /// Constants derived from the closed form: `C = max(aλ, 1/(aλ))` and
    /// `K = aλ 2^{1-λ} / C²`, so that `C²K` bounds the locally Hölder ratio
    /// of `DT` on each branch.
    pub fn with_defaults(lambda: f64, a: f64, alpha: f64) -> Result<Self> {
        let al = a * lambda;
        let c_order = al.max(1.0 / al).max(1.0);
        let k_holder = al * 2f64.powf(1.0 - lambda) / (c_order * c_order);
        Self::new(lambda, a, alpha, c_order, k_holder)
    }

    /// The full-branch member `a = 2^λ`.
    pub fn full_branch(lambda: f64, alpha: f64) -> Result<Self> {
        Self::with_defaults(lambda, 2f64.powf(lambda), alpha)
    }

    /// `λ = 1, a = 2`: the doubling map `2x ∓ 1/2`.
    pub fn calibration() -> Self {
        Self::with_defaults(1.0, 2.0, 0.5).expect("calibration parameters are admissible")
    }

    pub fn validate(&self) -> Result<()> {
        let Self { lambda, a, alpha, c_order, k_holder } = *self;
        let bad = |m: String| Err(Error::Config(m));
        if !(lambda > 0.0 && lambda <= 1.0) {
            return bad(format!("lambda = {lambda} not in (0, 1]"));
        }
        if !(a > 1.0 && a <= 2f64.powf(lambda) * (1.0 + PARAM_SLACK)) {
            return bad(format!("a = {a} not in (1, 2^lambda]"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return bad(format!("alpha = {alpha} not in (0, 1)"));
        }
        if alpha < 1.0 - lambda - PARAM_SLACK {
            return bad(format!("alpha = {alpha} below 1 - lambda = {}", 1.0 - lambda));
        }
        if !(c_order >= 1.0) {
            return bad(format!("c_order = {c_order} below 1"));
        }
        if !(k_holder > 0.0 && k_holder.is_finite()) {
            return bad(format!("k_holder = {k_holder} must be positive"));
        }
        Ok(())
    }

    fn check_point(x: f64) -> Result<()> {
        if x == 0.0 {
            return Err(Error::Singularity(x));
        }
        if !(x.abs() <= 0.5) {
            return Err(Error::Domain(x));
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        Self::check_point(x)?;
        Ok(self.apply(x))
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        Self::check_point(x)?;
        Ok(self.slope(x))
    }

    /// Unchecked evaluation. `x = ±0` returns the one-sided limit of the
    /// branch selected by the sign bit.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        let v = self.a * x.abs().powf(self.lambda) - 0.5;
        if x.is_sign_negative() {
            -v
        } else {
            v
        }
    }

    #[inline]
    pub fn slope(&self, x: f64) -> f64 {
        self.a * self.lambda * x.abs().powf(self.lambda - 1.0)
    }

    #[inline]
    pub fn log_slope(&self, x: f64) -> f64 {
        (self.a * self.lambda).ln() + (self.lambda - 1.0) * x.abs().ln()
    }

    /// Closed image of a branch: right is `[-1/2, a 2^{-λ} - 1/2]`, left is
    /// its mirror.
    pub fn branch_image(&self, branch: Branch) -> (f64, f64) {
        let top = self.a * 0.5f64.powf(self.lambda) - 0.5;
        match branch {
            Branch::Right => (-0.5, top),
            Branch::Left => (-top, 0.5),
        }
    }

    pub fn branch_inverse(&self, branch: Branch, y: f64) -> Result<f64> {
        let (lo, hi) = self.branch_image(branch);
        if !(y >= lo && y <= hi) {
            return Err(Error::NoPreimage { branch, y });
        }
        Ok(self.inverse(branch, y))
    }

    /// Unchecked inverse; `y` is clamped into the branch image first so that
    /// rounding at the image edges cannot produce NaN.
    #[inline]
    pub fn inverse(&self, branch: Branch, y: f64) -> f64 {
        match branch {
            Branch::Right => (((y + 0.5) / self.a).max(0.0)).powf(1.0 / self.lambda).min(0.5),
            Branch::Left => -(((0.5 - y) / self.a).max(0.0)).powf(1.0 / self.lambda).min(0.5),
        }
    }

    pub fn to_kv(&self) -> KvBlock {
        let mut kv = KvBlock::new();
        kv.set_f64("lambda", self.lambda);
        kv.set_f64("a", self.a);
        kv.set_f64("alpha", self.alpha);
        kv.set_f64("c_order", self.c_order);
        kv.set_f64("k_holder", self.k_holder);
        kv
    }

    pub fn from_kv(kv: &KvBlock) -> Result<Self> {
        Self::new(
            kv.require("lambda")?,
            kv.require("a")?,
            kv.require("alpha")?,
            kv.require("c_order")?,
            kv.require("k_holder")?,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularityReport {
    pub c_est: f64,
    pub pass: bool,
}

/// Estimates the order-of-singularity constant from `|DT(x)| |x|^{1-λ}` on
/// log-spaced points of both branches.
pub fn validate_singularity_order(p: &MapParams, n_samples: usize) -> Result<SingularityReport> {
    if n_samples < 2 {
        return Err(Error::Precondition("n_samples must be at least 2".into()));
    }
    let mut c_est: f64 = 1.0;
    for x in log_spaced(1e-12, 0.5, n_samples) {
        for s in [x, -x] {
            let ratio = p.slope(s) * s.abs().powf(1.0 - p.lambda);
            c_est = c_est.max(ratio).max(1.0 / ratio);
        }
    }
    Ok(SingularityReport { c_est, pass: c_est <= p.c_order })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HolderReport {
    pub k_est: f64,
    pub pairs_used: usize,
    pub pass: bool,
}

/// `|DT(x) - DT(y)| |x|^α |y|^α / |x - y|^α` for a same-side pair, `None`
/// for degenerate or mixed-side pairs.
pub fn local_holder_ratio(p: &MapParams, x: f64, y: f64) -> Option<f64> {
    if x == y || x == 0.0 || y == 0.0 || (x < 0.0) != (y < 0.0) {
        return None;
    }
    let a = p.alpha;
    Some((p.slope(x) - p.slope(y)).abs() * x.abs().powf(a) * y.abs().powf(a) / (x - y).abs().powf(a))
}

/// Sampled check of the locally Hölder bound on `DT`, against `C² K`.
pub fn validate_local_holder(p: &MapParams, n_pairs: usize) -> Result<HolderReport> {
    if n_pairs == 0 {
        return Err(Error::Precondition("n_pairs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_4a11);
    let mut k_est: f64 = 0.0;
    let mut used = 0;
    for i in 0..n_pairs {
        let x = 10f64.powf(rng.gen_range(-9.0..=(0.5f64).log10()));
        let y = 10f64.powf(rng.gen_range(-9.0..=(0.5f64).log10()));
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        if let Some(r) = local_holder_ratio(p, s * x, s * y) {
            k_est = k_est.max(r);
            used += 1;
        }
    }
    Ok(HolderReport { k_est, pairs_used: used, pass: k_est <= p.c_order * p.c_order * p.k_holder })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyDistance {
    pub sup_diff: f64,
    pub holder_diff: f64,
}

/// Sup distance of the maps and α-Hölder seminorm (α from `p1`) of the
/// difference of reciprocal derivatives, both on a uniform grid of I.
pub fn family_distance(p1: &MapParams, p2: &MapParams, grid: usize) -> Result<FamilyDistance> {
    if grid < 2 {
        return Err(Error::Precondition("grid must have at least 2 points".into()));
    }
    let pts: Vec<f64> = (0..grid)
        .map(|i| -0.5 + i as f64 / (grid - 1) as f64)
        .filter(|x| x.abs() > 1e-12)
        .collect();
    let sup_diff = pts
        .iter()
        .map(|&x| (p1.apply(x) - p2.apply(x)).abs())
        .fold(0.0, f64::max);
    let g: Vec<f64> = pts.iter().map(|&x| 1.0 / p1.slope(x) - 1.0 / p2.slope(x)).collect();
    let mut holder_diff: f64 = 0.0;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            if (pts[i] < 0.0) != (pts[j] < 0.0) {
                continue;
            }
            let r = (g[i] - g[j]).abs() / (pts[i] - pts[j]).abs().powf(p1.alpha);
            holder_diff = holder_diff.max(r);
        }
    }
    Ok(FamilyDistance { sup_diff, holder_diff })
}

pub(crate) fn log_spaced(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(move |i| {
        if i + 1 == n {
            hi
        } else if i == 0 {
            lo
        } else {
            (a + (b - a) * i as f64 / (n - 1) as f64).exp().clamp(lo, hi)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * (1.0 + b.abs())
        }
    }

    fn p075() -> MapParams {
        MapParams::full_branch(0.75, 0.25).unwrap()
    }

    #[test]
    fn eval_examples() {
        let c = MapParams::calibration();
        assert_eq!(c.eval(0.25).unwrap(), 0.0);
        assert_eq!(c.eval(-0.25).unwrap(), 0.0);
        let direct = 2f64.powf(0.75) * 0.1f64.powf(0.75) - 0.5;
        assert_eq!(p075().eval(0.1).unwrap(), direct);
        assert!(close(p075().eval(0.1).unwrap(), -0.20094, 1e-4));
    }

    #[test]
    fn eval_errors() {
        let c = MapParams::calibration();
        assert!(matches!(c.eval(0.0), Err(Error::Singularity(_))));
        assert!(matches!(c.eval(0.6), Err(Error::Domain(_))));
        assert!(matches!(c.derivative(0.0), Err(Error::Singularity(_))));
    }

    #[test]
    fn one_sided_limits_and_signs() {
        let p = p075();
        assert!(p.eval(1e-12).unwrap() < -0.49);
        assert!(p.eval(-1e-12).unwrap() > 0.49);
        assert!(close(p.eval(0.5).unwrap(), 0.5, 1e-15));
        assert!(close(p.eval(-0.5).unwrap(), -0.5, 1e-15));
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(MapParams::calibration().derivative(0.3).unwrap(), 2.0);
        assert!(close(p075().derivative(0.5).unwrap(), 1.5, 1e-14));
        assert!(p075().derivative(1e-10).unwrap() > 1e2);
        assert!(p075().derivative(-0.3).unwrap() > 0.0);
    }

    #[test]
    fn derivative_matches_central_difference() {
        for p in [p075(), MapParams::full_branch(0.55, 0.45).unwrap(), MapParams::calibration()] {
            for x in log_spaced(1e-3, 0.49, 200) {
                for s in [x, -x] {
                    let h = 1e-6 * s.abs();
                    let fd = (p.apply(s + h) - p.apply(s - h)) / (2.0 * h);
                    assert!(close(fd, p.slope(s), 1e-6), "x = {s}");
                }
            }
        }
    }

    #[test]
    fn branch_inverse_examples() {
        let c = MapParams::calibration();
        assert_eq!(c.branch_inverse(Branch::Right, 0.0).unwrap(), 0.25);
        assert_eq!(c.branch_inverse(Branch::Left, 0.0).unwrap(), -0.25);
        let p = p075();
        let x = p.branch_inverse(Branch::Right, -0.2).unwrap();
        // bisection cross-check
        let (mut lo, mut hi) = (1e-300, 0.5);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if p.apply(mid) < -0.2 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!(close(x, lo, 1e-12));
        assert!(close(x, (0.3f64 / 2f64.powf(0.75)).powf(1.0 / 0.75), 1e-12));
        assert!(close(x, 0.100415, 1e-6));
        let sub = MapParams::with_defaults(0.75, 1.5, 0.25).unwrap();
        assert!(matches!(sub.branch_inverse(Branch::Right, 0.49), Err(Error::NoPreimage { .. })));
    }

    #[test]
    fn branch_inverse_is_left_inverse() {
        let c = MapParams::calibration();
        let p = p075();
        for x in log_spaced(1e-8, 0.5, 500) {
            for s in [x, -x] {
                let b = Branch::of(s);
                assert!((c.inverse(b, c.apply(s)) - s).abs() <= 1e-12);
                assert!((p.inverse(b, p.apply(s)) - s).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn eval_stays_in_interval() {
        for lam in [0.3, 0.55, 0.75, 0.95, 1.0] {
            let p = MapParams::full_branch(lam, (1.0 - lam).max(0.45)).unwrap();
            for x in log_spaced(1e-300, 0.5, 10_000) {
                for s in [x, -x] {
                    let y = p.apply(s);
                    assert!(y.abs() <= 0.5 + 1e-15, "lam {lam} x {s} y {y}");
                }
            }
        }
    }

    #[test]
    fn singularity_ratio_is_constant() {
        let p = p075();
        let al = p.a * p.lambda;
        for x in log_spaced(1e-12, 0.5, 1000) {
            let r = p.slope(x) * x.powf(1.0 - p.lambda);
            assert!(close(r, al, 1e-10));
        }
    }

    #[test]
    fn singularity_order_examples() {
        let mut c = MapParams::calibration();
        let r = validate_singularity_order(&c, 100).unwrap();
        assert!(close(r.c_est, 2.0, 1e-15));
        assert!(r.pass);
        c.c_order = 1.5;
        assert!(!validate_singularity_order(&c, 100).unwrap().pass);
        let mut p = p075();
        p.c_order = 2.0;
        let r = validate_singularity_order(&p, 100).unwrap();
        assert!(close(r.c_est, 1.2613, 1e-4) && r.pass);
        let r2 = validate_singularity_order(&p, 2).unwrap();
        assert!(close(r2.c_est, r.c_est, 1e-12));
        assert!(validate_singularity_order(&p, 1).is_err());
    }

    #[test]
    fn local_holder_examples() {
        let r = validate_local_holder(&MapParams::calibration(), 1000).unwrap();
        assert_eq!(r.k_est, 0.0);
        assert!(r.pass);
        let p = p075();
        let direct = (p.slope(0.1) - p.slope(0.2)).abs() * 0.1f64.powf(0.25) * 0.2f64.powf(0.25)
            / 0.1f64.powf(0.25);
        assert_eq!(local_holder_ratio(&p, 0.1, 0.2).unwrap(), direct);
        assert!(local_holder_ratio(&p, 0.1, 0.1).is_none());
        assert!(local_holder_ratio(&p, 0.1, -0.1).is_none());
        assert!(validate_local_holder(&p, 5000).unwrap().pass);
    }

    #[test]
    fn family_distance_examples() {
        let p = MapParams::calibration();
        let d = family_distance(&p, &p, 101).unwrap();
        assert_eq!((d.sup_diff, d.holder_diff), (0.0, 0.0));
        let q = MapParams::with_defaults(1.0, 1.99, 0.5).unwrap();
        let d = family_distance(&p, &q, 101).unwrap();
        assert!(close(d.sup_diff, 0.005, 1e-12));
        let q2 = MapParams::with_defaults(1.0, 1.999, 0.5).unwrap();
        assert!(family_distance(&p, &q2, 101).unwrap().sup_diff < d.sup_diff);
    }

    #[test]
    fn params_round_trip_through_kv() {
        let p = p075();
        let back = MapParams::from_kv(&KvBlock::parse(&p.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(MapParams::with_defaults(0.75, 2.0, 0.25).is_err());
        assert!(MapParams::with_defaults(0.75, 1.5, 0.1).is_err());
        assert!(MapParams::with_defaults(0.0, 1.5, 0.5).is_err());
    }
}
