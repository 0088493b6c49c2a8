//! Finite windows of the parameter shift and the skew product over them.
//!
//! A point ω of the shift space is realized as a window `ω_{-L}, ..., ω_R`
//! drawn i.i.d. uniform on `[λ0, λ̄]`. Forward coordinates `ω_0, ω_1, ...` and
//! backward coordinates `ω_{-1}, ω_{-2}, ...` come from two independent
//! ChaCha streams of the same seed, so enlarging the window never changes
//! coordinates that were already drawn.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvBlock;
use crate::map_family::MapParams;

/// Points with `|x|` below this are treated as hitting the singularity.
pub const SINGULAR_EPS: f64 = 1e-15;

/// How the scale `a` is chosen for each λ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleRule {
    /// `a = 2^λ` (full branches).
    FullBranch,
    /// `a = f 2^λ` with `f` in `(2^{-λ}, 1]`.
    Scaled(f64),
    /// The same `a` for every λ.
    Fixed(f64),
}

impl ScaleRule {
    pub fn scale(&self, lambda: f64) -> f64 {
        match *self {
            ScaleRule::FullBranch => 2f64.powf(lambda),
            ScaleRule::Scaled(f) => f * 2f64.powf(lambda),
            ScaleRule::Fixed(a) => a,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "pow2" {
            return Ok(ScaleRule::FullBranch);
        }
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number in scale rule `{s}`")))
        };
        if let Some(v) = s.strip_prefix("scaled:") {
            return Ok(ScaleRule::Scaled(num(v)?));
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            return Ok(ScaleRule::Fixed(num(v)?));
        }
        Err(Error::Config(format!("unknown scale rule `{s}` (pow2 | scaled:F | fixed:A)")))
    }
}

impl std::fmt::Display for ScaleRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleRule::FullBranch => write!(f, "pow2"),
            ScaleRule::Scaled(v) => write!(f, "scaled:{v:?}"),
            ScaleRule::Fixed(v) => write!(f, "fixed:{v:?}"),
        }
    }
}

/// The admissible parameter interval `[λ0, λ̄]` and the rule for `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyRange {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub a_rule: ScaleRule,
    /// Hölder exponent shared by every member.
    pub alpha: f64,
}

impl FamilyRange {
    /// Degenerate ranges (`lo == hi`) are allowed; they give the
    /// deterministic system.
    pub fn new(lambda_lo: f64, lambda_hi: f64, a_rule: ScaleRule, alpha: f64) -> Result<Self> {
        let r = Self { lambda_lo, lambda_hi, a_rule, alpha };
        r.validate()?;
        Ok(r)
    }

    pub fn constant(lambda: f64, alpha: f64) -> Result<Self> {
        Self::new(lambda, lambda, ScaleRule::FullBranch, alpha)
    }

    pub fn calibration() -> Self {
        Self::constant(1.0, 0.5).expect("calibration range is admissible")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lo > 0.0 && self.lambda_lo <= self.lambda_hi && self.lambda_hi <= 1.0) {
            return Err(Error::Config(format!(
                "empty or invalid lambda range [{}, {}]",
                self.lambda_lo, self.lambda_hi
            )));
        }
        self.params(self.lambda_lo)?;
        self.params(self.lambda_hi)?;
        Ok(())
    }

    pub fn params(&self, lambda: f64) -> Result<MapParams> {
        MapParams::with_defaults(lambda, self.a_rule.scale(lambda), self.alpha)
    }

    pub fn width(&self) -> f64 {
        self.lambda_hi - self.lambda_lo
    }

    pub fn to_kv(&self) -> KvBlock {
        let mut kv = KvBlock::new();
        kv.set_f64("lambda_lo", self.lambda_lo);
        kv.set_f64("lambda_hi", self.lambda_hi);
        kv.set("a_rule", self.a_rule);
        kv.set_f64("alpha", self.alpha);
        kv
    }

    pub fn from_kv(kv: &KvBlock) -> Result<Self> {
        let rule = match kv.get_str("a_rule") {
            Some(s) => ScaleRule::parse(s)?,
            None => ScaleRule::FullBranch,
        };
        Self::new(kv.require("lambda_lo")?, kv.require("lambda_hi")?, rule, kv.require("alpha")?)
    }
}

/// A window `ω_{lo..=hi}` of a parameter sequence, viewed from a shift.
///
/// Shifting is O(1): the underlying storage is shared.
#[derive(Clone, Debug)]
pub struct OmegaSequence {
    values: Arc<[f64]>,
    params: Arc<[MapParams]>,
    /// Storage index of the coordinate this view calls `ω_0`.
    origin: i64,
    seed: Option<u64>,
    range: FamilyRange,
}

impl PartialEq for OmegaSequence {
    fn eq(&self, other: &Self) -> bool {
        self.window() == other.window()
            && self.range == other.range
            && (self.window().0..=self.window().1)
                .all(|i| self.lambda(i).unwrap().to_bits() == other.lambda(i).unwrap().to_bits())
    }
}

impl OmegaSequence {
    /// Draws `ω_{-left}, ..., ω_{right}` i.i.d. uniform on the range.
    pub fn sample(seed: u64, left: usize, right: usize, range: FamilyRange) -> Result<Self> {
        range.validate()?;
        let mut fwd = ChaCha8Rng::seed_from_u64(seed);
        let mut bwd = ChaCha8Rng::seed_from_u64(seed);
        bwd.set_stream(1);
        let draw = |rng: &mut ChaCha8Rng| {
            let u: f64 = rng.gen();
            if range.width() == 0.0 {
                range.lambda_lo
            } else {
                (range.lambda_lo + range.width() * u).min(range.lambda_hi)
            }
        };
        let back: Vec<f64> = (0..left).map(|_| draw(&mut bwd)).collect();
        let mut values: Vec<f64> = back.into_iter().rev().collect();
        values.extend((0..=right).map(|_| draw(&mut fwd)));
        let mut s = Self::from_window(values, left, range)?;
        s.seed = Some(seed);
        Ok(s)
    }

    /// `values[0]` is `ω_{-left}`.
    pub fn from_window(values: Vec<f64>, left: usize, range: FamilyRange) -> Result<Self> {
        if values.len() <= left {
            return Err(Error::Config("omega window must contain index 0".into()));
        }
        let params = values
            .iter()
            .map(|&l| {
                if l < range.lambda_lo || l > range.lambda_hi {
                    return Err(Error::Config(format!("lambda {l} outside the family range")));
                }
                range.params(l)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            values: values.into(),
            params: params.into(),
            origin: left as i64,
            seed: None,
            range,
        })
    }

    pub fn constant(lambda: f64, left: usize, right: usize, range: FamilyRange) -> Result<Self> {
        Self::from_window(vec![lambda; left + right + 1], left, range)
    }

    /// The doubling map at every index.
    pub fn calibration(left: usize, right: usize) -> Self {
        Self::constant(1.0, left, right, FamilyRange::calibration()).expect("valid calibration window")
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn range(&self) -> &FamilyRange {
        &self.range
    }

    /// Inclusive index bounds `(lo, hi)` of this view.
    pub fn window(&self) -> (i64, i64) {
        (-self.origin, self.values.len() as i64 - 1 - self.origin)
    }

    fn slot(&self, i: i64) -> Result<usize> {
        let (lo, hi) = self.window();
        if i < lo || i > hi {
            return Err(Error::Window { index: i, lo, hi });
        }
        Ok((i + self.origin) as usize)
    }

    pub fn lambda(&self, i: i64) -> Result<f64> {
        Ok(self.values[self.slot(i)?])
    }

    pub fn params(&self, i: i64) -> Result<&MapParams> {
        Ok(&self.params[self.slot(i)?])
    }

    /// Errors unless indices `from..from+len` are all in the window.
    pub fn ensure_forward(&self, from: i64, len: usize) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        self.slot(from)?;
        self.slot(from + len as i64 - 1)?;
        Ok(())
    }

    /// `σ^m ω` (negative `m` shifts right). The view may end up with an
    /// empty forward window; accessors then return window errors.
    pub fn shifted(&self, m: i64) -> Self {
        let mut s = self.clone();
        s.origin += m;
        s
    }

    /// Copy with `ω_i` replaced.
    pub fn with_value(&self, i: i64, lambda: f64) -> Result<Self> {
        let slot = self.slot(i)?;
        let mut values = self.values.to_vec();
        values[slot] = lambda;
        let mut s = Self::from_window(values, self.origin.max(0) as usize, self.range)?;
        s.origin = self.origin;
        s.seed = None;
        Ok(s)
    }

    /// True when every coordinate of the window is the same λ.
    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0].to_bits() == w[1].to_bits())
    }

    /// Bit patterns of `ω_{from..from+len}`, used as a cache key.
    pub fn key(&self, from: i64, len: usize) -> Result<Vec<u64>> {
        (0..len as i64).map(|j| self.lambda(from + j).map(f64::to_bits)).collect()
    }

    /// CSV with a comment header carrying seed and range, then `index,lambda`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (lo, hi) = self.window();
        writeln!(w, "# seed={}", self.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into()))?;
        for line in self.range.to_kv().to_text().lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "# left={} right={}", -lo, hi)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "lambda"])?;
        for i in lo..=hi {
            out.write_record([i.to_string(), format!("{:?}", self.lambda(i)?)])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut header = String::new();
        let mut body = String::new();
        for line in r.lines() {
            let line = line?;
            if let Some(h) = line.strip_prefix('#') {
                header.push_str(h.trim());
                header.push('\n');
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let seed_line = header
            .lines()
            .find_map(|l| l.strip_prefix("seed="))
            .ok_or_else(|| Error::Config("missing seed header".into()))?;
        let seed = if seed_line == "none" {
            None
        } else {
            Some(seed_line.parse::<u64>().map_err(|_| Error::Config("bad seed".into()))?)
        };
        let kv_text: String = header
            .lines()
            .filter(|l| !l.starts_with("seed=") && !l.starts_with("left="))
            .map(|l| format!("{l}\n"))
            .collect();
        let range = FamilyRange::from_kv(&KvBlock::parse(&kv_text)?)?;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = || Error::Config("bad omega csv row".into());
            let i: i64 = rec.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let l: f64 = rec.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            rows.push((i, l));
        }
        let first = rows.first().ok_or_else(|| Error::Config("empty omega csv".into()))?.0;
        if first > 0 || rows.iter().enumerate().any(|(k, (i, _))| *i != first + k as i64) {
            return Err(Error::Config("omega csv indices must be contiguous and include 0".into()));
        }
        let mut s = Self::from_window(rows.iter().map(|r| r.1).collect(), (-first) as usize, range)?;
        s.seed = seed;
        Ok(s)
    }
}

/// `[x, T_ω x, ..., T^n_ω x]`.
pub fn compose(omega: &OmegaSequence, x: f64, n: usize) -> Result<Vec<f64>> {
    omega.ensure_forward(0, n)?;
    let mut orbit = Vec::with_capacity(n + 1);
    let mut y = x;
    if y.abs() > 0.5 {
        return Err(Error::Domain(y));
    }
    for k in 0..=n {
        if y.abs() < SINGULAR_EPS {
            return Err(Error::SingularOrbit { step: k });
        }
        orbit.push(y);
        if k < n {
            y = omega.params(k as i64)?.apply(y);
        }
    }
    Ok(orbit)
}

/// `log |DT^n_ω(x)|`, the sum of log slopes along the orbit.
pub fn orbit_log_derivative(omega: &OmegaSequence, x: f64, n: usize) -> Result<f64> {
    let orbit = compose(omega, x, n)?;
    let mut acc = 0.0;
    for (k, &y) in orbit.iter().take(n).enumerate() {
        acc += omega.params(k as i64)?.log_slope(y);
    }
    Ok(acc)
}

/// `DT^n_ω(x)` by the chain rule.
pub fn orbit_derivative(omega: &OmegaSequence, x: f64, n: usize) -> Result<f64> {
    let orbit = compose(omega, x, n)?;
    let mut acc = 1.0;
    for (k, &y) in orbit.iter().take(n).enumerate() {
        acc *= omega.params(k as i64)?.slope(y);
    }
    Ok(acc)
}

/// Orbitwise expansion constants `|DT^n_ω(x)| > C̃ e^{nℓ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionEstimate {
    pub c_tilde: f64,
    pub ell: f64,
    pub n_max: usize,
    pub samples_used: usize,
    pub pass: bool,
}

/// Grid step for ℓ.
pub const ELL_GRID: f64 = 1e-4;

/// Measures the worst log-derivative `m_n` over the samples for each
/// `n <= n_max`. First tries `C̃ = 1`, i.e. `ℓ = min_n m_n / n`; when that
/// is not positive (pointwise contraction somewhere) it falls back to half
/// the long-run rate `m_{n_max} / n_max` and lets `C̃ < 1` absorb the
/// transient. `ℓ` is floored to a grid of step [`ELL_GRID`] and
/// `C̃ = min_n exp(m_n - nℓ)`. Samples whose orbit meets the singular set
/// before `n_max` are skipped.
pub fn check_uniform_expansion(
    omega: &OmegaSequence,
    x_samples: &[f64],
    n_max: usize,
) -> Result<ExpansionEstimate> {
    omega.ensure_forward(0, n_max)?;
    let mut worst = vec![f64::INFINITY; n_max + 1];
    let mut used = 0;
    'samples: for &x in x_samples {
        let mut y = x;
        let mut acc = 0.0;
        let mut row = Vec::with_capacity(n_max);
        for k in 0..n_max {
            if y.abs() < SINGULAR_EPS || y.abs() > 0.5 {
                continue 'samples;
            }
            let p = omega.params(k as i64)?;
            acc += p.log_slope(y);
            y = p.apply(y);
            row.push(acc);
        }
        used += 1;
        for (n, v) in row.into_iter().enumerate() {
            worst[n + 1] = worst[n + 1].min(v);
        }
    }
    if used == 0 || n_max == 0 {
        return Ok(ExpansionEstimate { c_tilde: 0.0, ell: 0.0, n_max, samples_used: used, pass: false });
    }
    let direct = (1..=n_max).map(|n| worst[n] / n as f64).fold(f64::INFINITY, f64::min);
    let raw = if direct > 0.0 { direct } else { 0.5 * worst[n_max] / n_max as f64 };
    let ell = (raw / ELL_GRID).floor() * ELL_GRID;
    let c_tilde = (1..=n_max)
        .map(|n| (worst[n] - n as f64 * ell).exp())
        .fold(f64::INFINITY, f64::min);
    Ok(ExpansionEstimate { c_tilde, ell, n_max, samples_used: used, pass: ell > 0.0 && c_tilde > 0.0 })
}

/// Deterministic sample points for the expansion check, spread over I
/// and kept at least `margin` away from 0.
pub fn expansion_samples(n: usize, margin: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(margin..0.5);
            if rng.gen::<bool>() {
                u
            } else {
                -u
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_range() -> FamilyRange {
        FamilyRange::new(0.55, 0.95, ScaleRule::FullBranch, 0.45).unwrap()
    }

    #[test]
    fn degenerate_range_gives_constant_sequence() {
        let r = FamilyRange::constant(0.7, 0.3).unwrap();
        let w = OmegaSequence::sample(7, 0, 9, r).unwrap();
        assert_eq!(w.window(), (0, 9));
        for i in 0..=9 {
            assert_eq!(w.lambda(i).unwrap(), 0.7);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_prefix_stable() {
        let a = OmegaSequence::sample(42, 5, 50, random_range()).unwrap();
        let b = OmegaSequence::sample(42, 5, 50, random_range()).unwrap();
        assert_eq!(a, b);
        let c = OmegaSequence::sample(42, 20, 200, random_range()).unwrap();
        for i in -5..=50 {
            assert_eq!(a.lambda(i).unwrap().to_bits(), c.lambda(i).unwrap().to_bits());
        }
        let d = OmegaSequence::sample(43, 5, 50, random_range()).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn sample_mean_matches_uniform_law() {
        let r = random_range();
        let n = 100_000;
        let w = OmegaSequence::sample(3, 0, n - 1, r).unwrap();
        let mean = (0..n as i64).map(|i| w.lambda(i).unwrap()).sum::<f64>() / n as f64;
        let sigma = r.width() / (12.0 * n as f64).sqrt();
        assert!((mean - 0.75).abs() < 3.0 * sigma, "mean {mean}");
        assert!((0..n as i64).all(|i| {
            let l = w.lambda(i).unwrap();
            (0.55..=0.95).contains(&l)
        }));
    }

    #[test]
    fn empty_range_is_rejected() {
        assert!(FamilyRange::new(0.9, 0.6, ScaleRule::FullBranch, 0.45).is_err());
    }

    #[test]
    fn compose_examples() {
        let w = OmegaSequence::calibration(0, 10);
        assert!(matches!(compose(&w, 0.25, 2), Err(Error::SingularOrbit { step: 1 })));
        let orbit = compose(&w, 0.2, 3).unwrap();
        for (got, want) in orbit.iter().zip([0.2, -0.1, 0.3, 0.1]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(compose(&w, 0.2, 0).unwrap(), vec![0.2]);
        assert!(matches!(compose(&w, 0.2, 12), Err(Error::Window { .. })));
    }

    #[test]
    fn orbit_derivative_examples() {
        let w = OmegaSequence::calibration(0, 10);
        assert_eq!(orbit_derivative(&w, 0.1234, 5).unwrap(), 32.0);
        assert_eq!(orbit_derivative(&w, 0.1234, 0).unwrap(), 1.0);
        let r = FamilyRange::constant(0.75, 0.25).unwrap();
        let w = OmegaSequence::constant(0.75, 0, 5, r).unwrap();
        let d = orbit_derivative(&w, 0.4, 2).unwrap();
        let h = 1e-7;
        let f = |x: f64| *compose(&w, x, 2).unwrap().last().unwrap();
        let fd = (f(0.4 + h) - f(0.4 - h)) / (2.0 * h);
        assert!((d - fd).abs() / d < 1e-6);
    }

    #[test]
    fn expansion_examples() {
        let xs = expansion_samples(500, 1e-3, 1);
        let w = OmegaSequence::calibration(0, 40);
        let e = check_uniform_expansion(&w, &xs, 30).unwrap();
        assert!(e.pass);
        assert!((e.ell - 2f64.ln()).abs() <= ELL_GRID);
        assert!((e.c_tilde - 1.0).abs() < 1e-3);

        let r = FamilyRange::constant(0.75, 0.25).unwrap();
        let w = OmegaSequence::constant(0.75, 0, 40, r).unwrap();
        let e = check_uniform_expansion(&w, &xs, 30).unwrap();
        assert!(e.pass && e.ell >= 1.5f64.ln() - ELL_GRID);

        let r = FamilyRange::constant(0.3, 0.7).unwrap();
        let w = OmegaSequence::constant(0.3, 0, 40, r).unwrap();
        let e = check_uniform_expansion(&w, &xs, 30).unwrap();
        assert!(e.c_tilde.is_finite());
    }

    #[test]
    fn csv_round_trip() {
        let a = OmegaSequence::sample(9, 3, 12, random_range()).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let b = OmegaSequence::read_csv(buf.as_slice()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.seed(), Some(9));
    }

    #[test]
    fn shifted_view_and_window_errors() {
        let a = OmegaSequence::sample(1, 2, 10, random_range()).unwrap();
        let s = a.shifted(3);
        assert_eq!(s.window(), (-5, 7));
        assert_eq!(s.lambda(0).unwrap(), a.lambda(3).unwrap());
        assert!(matches!(a.lambda(11), Err(Error::Window { .. })));
        let b = a.with_value(4, 0.6).unwrap();
        assert_eq!(b.lambda(4).unwrap(), 0.6);
        assert_eq!(b.lambda(-2).unwrap(), a.lambda(-2).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn compose_shift_consistency(seed in 0u64..1000, x in 0.001f64..0.5, neg in any::<bool>(),
                                     m in 0usize..15, n in 0usize..15) {
            let w = OmegaSequence::sample(seed, 0, 40, random_range()).unwrap();
            let x = if neg { -x } else { x };
            let (Ok(full), Ok(head)) = (compose(&w, x, m + n), compose(&w, x, m)) else { return Ok(()); };
            let tail = compose(&w.shifted(m as i64), *head.last().unwrap(), n).unwrap();
            let mut joined = head.clone();
            joined.extend_from_slice(&tail[1..]);
            prop_assert_eq!(full, joined);
        }

        #[test]
        fn derivative_cocycle(seed in 0u64..1000, x in 0.001f64..0.5, m in 0usize..12, n in 0usize..12) {
            let w = OmegaSequence::sample(seed, 0, 40, random_range()).unwrap();
            let Ok(full) = orbit_derivative(&w, x, m + n) else { return Ok(()); };
            let head = orbit_derivative(&w, x, m).unwrap();
            let y = *compose(&w, x, m).unwrap().last().unwrap();
            let tail = orbit_derivative(&w.shifted(m as i64), y, n).unwrap();
            prop_assert!(((head * tail) - full).abs() <= 1e-10 * full.abs());
        }
    }
}
