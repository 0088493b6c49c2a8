//! Full returns to Δ* and the induced map.
//!
//! Starting from Δ* at time 0, pieces run through escape rounds. At each
//! escape a subinterval mapping onto Δ* is carved out around the first
//! preimage of 0 found in the middle of the escaped image; the rest starts
//! a new round once the carved piece has returned, so every decision about
//! a point is taken from map indices before its return time.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::escape_engine::{add_stats, SampleConfig};
use crate::fit::{fit_log_linear, fit_tail, TailFit};
use crate::interval_partition::{Interval, PartitionConfig};
use crate::map_family::Branch;
use crate::pieces::{apply_branch, stratified_points, EventKind, Piece, RunParams, RunStats, Runner, SidePath};
use crate::random_driver::{FamilyRange, OmegaSequence};

/// Residual mass above this fraction of |Δ*| flags a run as truncated.
pub const RESIDUAL_FLAG: f64 = 1e-4;
/// Largest admissible error of the endpoint images of a carved return.
pub const MARKOV_TOL: f64 = 1e-9;
/// Fallback for t* when no density depth is found.
pub const T_STAR_CAP: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FullReturnConfig {
    pub delta_star: f64,
    pub t_star: usize,
    pub bar_delta: f64,
    pub beta_min: f64,
}

impl FullReturnConfig {
    pub fn new(cfg: &PartitionConfig, t_star: usize, bar_delta: f64, beta_min: f64) -> Result<Self> {
        let delta_star = cfg.delta_star();
        if !(delta_star < bar_delta && bar_delta < cfg.delta() / 5.0) {
            return Err(Error::Config(format!(
                "need δ* = {delta_star} < δ̄ = {bar_delta} < δ/5 = {}",
                cfg.delta() / 5.0
            )));
        }
        if t_star == 0 {
            return Err(Error::Config("t* must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min < 1.0) {
            return Err(Error::Config(format!("β = {beta_min} must lie in (0, 1)")));
        }
        Ok(Self { delta_star, t_star, bar_delta, beta_min })
    }

    /// δ̄ = δ/10, and t* the depth at which preimages of 0 become δ̄-dense
    /// for both extreme maps of `range` (at most [`T_STAR_CAP`]).
    pub fn for_range(cfg: &PartitionConfig, range: &FamilyRange) -> Result<Self> {
        Self::for_range_with(cfg, range, 0.1, T_STAR_CAP, 1e-9)
    }

    /// As [`for_range`](Self::for_range) with `δ̄ = bar_rel·δ` and a custom
    /// cap on t*.
    pub fn for_range_with(
        cfg: &PartitionConfig,
        range: &FamilyRange,
        bar_rel: f64,
        t_star_cap: usize,
        beta_min: f64,
    ) -> Result<Self> {
        let bar = cfg.delta() * bar_rel;
        let mut t_star = 1;
        for lam in [range.lambda_lo, range.lambda_hi] {
            let w = OmegaSequence::constant(lam, 0, t_star_cap, *range)?;
            let d = density_depth(&w, bar, t_star_cap)?.unwrap_or(t_star_cap);
            t_star = t_star.max(d);
        }
        Self::new(cfg, t_star, bar, beta_min)
    }

    pub fn delta_star_interval(&self) -> Interval {
        Interval::raw(-self.delta_star, self.delta_star)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preimages {
    pub points: Vec<f64>,
    /// Largest gap between consecutive points, including the ends ±1/2.
    pub max_gap: f64,
}

/// Every `x` with `T^n_ω(x) = 0` for some `n <= depth`, by backward solving.
pub fn preimages_of_zero(omega: &OmegaSequence, depth: usize) -> Result<Preimages> {
    if depth > 22 {
        return Err(Error::Precondition(format!("depth {depth} would list more than 2^23 points")));
    }
    omega.ensure_forward(0, depth)?;
    let mut pts = vec![0.0];
    for j in (0..depth).rev() {
        let p = omega.params(j as i64)?;
        let mut next = vec![0.0];
        for &y in &pts {
            for b in [Branch::Left, Branch::Right] {
                let (lo, hi) = p.branch_image(b);
                if y >= lo && y <= hi {
                    next.push(p.inverse(b, y));
                }
            }
        }
        next.sort_by(f64::total_cmp);
        next.dedup();
        pts = next;
    }
    let mut max_gap = (pts[0] + 0.5).max(0.5 - pts[pts.len() - 1]);
    for w in pts.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    Ok(Preimages { points: pts, max_gap })
}

/// Smallest depth at which the preimages of 0 leave no gap wider than `gap`.
/// Only gaps still wider than `gap` are refined, so the cost stays modest.
pub fn density_depth(omega: &OmegaSequence, gap: f64, cap: usize) -> Result<Option<usize>> {
    omega.ensure_forward(0, cap)?;
    struct Gap {
        lo: f64,
        hi: f64,
        img: (f64, f64),
        sides: Vec<Branch>,
    }
    let mut gaps = vec![
        Gap { lo: -0.5, hi: 0.0, img: (-0.5, 0.0), sides: Vec::new() },
        Gap { lo: 0.0, hi: 0.5, img: (0.0, 0.5), sides: Vec::new() },
    ];
    for d in 0..=cap {
        gaps.retain(|g| g.hi - g.lo > gap);
        if gaps.is_empty() {
            return Ok(Some(d));
        }
        if d == cap {
            break;
        }
        let p = omega.params(d as i64)?;
        let mut next = Vec::with_capacity(gaps.len() * 2);
        for mut g in gaps {
            let side = if g.img.0 + g.img.1 < 0.0 { Branch::Left } else { Branch::Right };
            let a = apply_branch(p, side, g.img.0);
            let b = apply_branch(p, side, g.img.1);
            g.sides.push(side);
            if a < 0.0 && b > 0.0 {
                let mut x0 = 0.0;
                for (k, &s) in g.sides.iter().enumerate().rev() {
                    x0 = omega.params(k as i64)?.inverse(s, x0);
                }
                next.push(Gap { lo: g.lo, hi: x0, img: (a, 0.0), sides: g.sides.clone() });
                next.push(Gap { lo: x0, hi: g.hi, img: (0.0, b), sides: g.sides });
            } else {
                g.img = (a, b);
                next.push(g);
            }
        }
        gaps = next;
    }
    Ok(None)
}

/// A carved full return inside an escaped image.
#[derive(Clone, Debug, PartialEq)]
pub struct FullReturn {
    /// In the coordinates of the escaped image.
    pub sub: Interval,
    pub t: usize,
    pub x_star: f64,
    pub sides: Vec<Branch>,
    /// `|sub| / |J|`.
    pub beta: f64,
    /// Lengths of the two components of `J \ sub`.
    pub gaps: (f64, f64),
    /// Largest distance of the endpoint images from ±δ*.
    pub image_error: f64,
}

impl FullReturn {
    /// Containment, gaps above δ/5, `β >= beta_min` and the Markov fit.
    pub fn holds(&self, j: &Interval, delta: f64, beta_min: f64) -> bool {
        j.lo < self.sub.lo
            && self.sub.hi < j.hi
            && self.gaps.0 > delta / 5.0
            && self.gaps.1 > delta / 5.0
            && self.beta >= beta_min
            && self.image_error <= MARKOV_TOL
    }
}

/// Finds the return of the middle δ̄-core of `j` onto Δ* with the smallest
/// `t` and pulls Δ* back around the preimage of 0 it contains. `omega` is
/// indexed from the escape time.
pub fn find_full_return(
    omega: &OmegaSequence,
    j: &Interval,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
) -> Result<FullReturn> {
    if j.len() < cfg.delta() || cfg.meets_delta0(j) {
        return Err(Error::Precondition(format!(
            "escape interval [{}, {}] must avoid Δ0 and have length at least δ",
            j.lo, j.hi
        )));
    }
    omega.ensure_forward(0, rcfg.t_star)?;
    let m = j.mid();
    let (mut lo, mut hi) = (m - rcfg.bar_delta / 2.0, m + rcfg.bar_delta / 2.0);
    let mut sides = Vec::new();
    for t in 1..=rcfg.t_star {
        let p = omega.params(t as i64 - 1)?;
        let side = if lo + hi < 0.0 { Branch::Left } else { Branch::Right };
        let (a, b) = (apply_branch(p, side, lo), apply_branch(p, side, hi));
        sides.push(side);
        if a <= 0.0 && b >= 0.0 {
            let pull = |y: f64| -> Result<f64> {
                let mut x = y;
                for (k, &s) in sides.iter().enumerate().rev() {
                    x = omega.params(k as i64)?.inverse(s, x);
                }
                Ok(x)
            };
            let ds = rcfg.delta_star;
            let sub = Interval::raw(pull(-ds)?, pull(ds)?);
            let x_star = pull(0.0)?;
            let push = |x: f64| -> Result<f64> {
                let mut y = x;
                for (k, &s) in sides.iter().enumerate() {
                    y = apply_branch(omega.params(k as i64)?, s, y);
                }
                Ok(y)
            };
            let image_error = (push(sub.lo)? + ds).abs().max((push(sub.hi)? - ds).abs());
            return Ok(FullReturn {
                sub,
                t,
                x_star,
                sides,
                beta: sub.len() / j.len(),
                gaps: (sub.lo - j.lo, j.hi - sub.hi),
                image_error,
            });
        }
        lo = a;
        hi = b;
    }
    Err(Error::NoFullReturn { t_star: rcfg.t_star })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReturnElement {
    pub id: u64,
    pub interval: Interval,
    pub tau: usize,
    /// Absolute escape times, increasing; the last one starts the return.
    pub escape_times: Vec<usize>,
    /// Steps from the last escape to the return.
    pub t: usize,
    /// Branch sides at times `0..tau`.
    pub path: SidePath,
    /// `|J̃| / |J|` of the carving step.
    pub beta: f64,
    /// Endpoint error of the image of the carved piece, measured at the
    /// escape time where the image is represented directly.
    pub image_error: f64,
    pub hits: u64,
}

impl ReturnElement {
    pub fn len(&self) -> f64 {
        self.interval.len()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.interval.lo <= x && x <= self.interval.hi
    }

    /// `F_ω(x) = T^τ_ω(x)` along the element's branches.
    pub fn apply(&self, omega: &OmegaSequence, x: f64) -> Result<f64> {
        let mut y = x;
        for (k, b) in self.path.iter().enumerate() {
            y = apply_branch(omega.params(k as i64)?, b, y);
        }
        Ok(y)
    }

    /// `log |DF_ω(x)|`.
    pub fn log_derivative(&self, omega: &OmegaSequence, x: f64) -> Result<f64> {
        let mut y = x;
        let mut acc = 0.0;
        for (k, b) in self.path.iter().enumerate() {
            let p = omega.params(k as i64)?;
            acc += p.log_slope(y);
            y = apply_branch(p, b, y);
        }
        Ok(acc)
    }

    fn from_piece(p: &Piece, fr: &FullReturn) -> Self {
        let mut path = p.path.clone();
        for &s in &fr.sides {
            path.push(s);
        }
        Self {
            id: p.id,
            interval: p.orig,
            tau: p.time + fr.t,
            escape_times: p.events.iter().filter(|e| e.kind == EventKind::Escape).map(|e| e.time).collect(),
            t: fr.t,
            path,
            beta: fr.beta,
            image_error: fr.image_error,
            hits: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReturnPartition {
    pub delta_star: f64,
    /// Sorted by left endpoint.
    pub elements: Vec<ReturnElement>,
    /// Mass still unreturned at the cap (or pruned).
    pub residual: f64,
    pub n_cap: usize,
    pub samples: Option<usize>,
    /// Escapes at which a return was attempted, and those where it failed.
    pub attempts: u64,
    pub failures: u64,
    pub stats: RunStats,
}

impl ReturnPartition {
    pub fn measure(&self) -> f64 {
        2.0 * self.delta_star
    }

    pub fn mass(&self, e: &ReturnElement) -> f64 {
        match self.samples {
            Some(n) => self.measure() * e.hits as f64 / n as f64,
            None => e.len(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.elements.iter().map(|e| self.mass(e)).sum::<f64>() + self.residual
    }

    /// Residual above [`RESIDUAL_FLAG`] of |Δ*|.
    pub fn truncated(&self) -> bool {
        self.residual > RESIDUAL_FLAG * self.measure()
    }

    /// Smallest measured carving fraction.
    pub fn beta_observed(&self) -> Option<f64> {
        self.elements.iter().map(|e| e.beta).min_by(f64::total_cmp)
    }

    /// The element containing `x`, if any.
    pub fn find(&self, x: f64) -> Option<&ReturnElement> {
        let i = self.elements.partition_point(|e| e.interval.lo <= x);
        let e = self.elements.get(i.checked_sub(1)?)?;
        e.contains(x).then_some(e)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["element_id", "lo", "hi", "tau", "escape_times", "t"])?;
        for e in &self.elements {
            let esc: Vec<String> = e.escape_times.iter().map(|t| t.to_string()).collect();
            out.write_record([
                e.id.to_string(),
                format!("{:?}", e.interval.lo),
                format!("{:?}", e.interval.hi),
                e.tau.to_string(),
                esc.join(";"),
                e.t.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Outcome {
    elements: Vec<ReturnElement>,
    capped: Option<Interval>,
    residual: f64,
    attempts: u64,
    failures: u64,
    stats: RunStats,
}

fn drive(
    omega: &OmegaSequence,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
    params: RunParams,
    focus: Option<f64>,
) -> Result<Outcome> {
    omega.ensure_forward(0, params.cap + rcfg.t_star)?;
    let delta = cfg.delta();
    let mut runner = Runner::new(omega, cfg, params);
    runner.focus = focus;
    runner.seed(rcfg.delta_star_interval());
    let mut elements = Vec::new();
    let (mut attempts, mut failures) = (0u64, 0u64);
    runner.run(|r, mut k| {
        attempts += 1;
        let e = k.time;
        let fr = match find_full_return(&omega.shifted(e as i64), &k.image, cfg, rcfg) {
            Ok(fr) if fr.holds(&k.image, delta, rcfg.beta_min) => fr,
            Ok(_) | Err(Error::NoFullReturn { .. }) => {
                failures += 1;
                k.start = e + rcfg.t_star;
                r.push_children(vec![k]);
                return Ok(());
            }
            Err(err) => return Err(err),
        };
        let cuts = [fr.sub.lo, fr.sub.hi];
        let orig = [r.pull(&k, cuts[0])?, r.pull(&k, cuts[1])?];
        let mut children = r.split(&k, &cuts, &orig);
        let ret = children.remove(1);
        let keep = match r.focus {
            Some(x) => ret.orig.lo <= x && x < ret.orig.hi,
            None => true,
        };
        if keep {
            elements.push(ReturnElement::from_piece(&ret, &fr));
        }
        for c in &mut children {
            c.start = e + fr.t;
        }
        r.push_children(children);
        Ok(())
    })?;
    elements.sort_by(|a, b| a.interval.lo.total_cmp(&b.interval.lo));
    Ok(Outcome { elements, capped: runner.capped, residual: runner.residual, attempts, failures, stats: runner.stats })
}

/// The full construction, pruning pieces lighter than `min_piece_rel·|Δ*|`.
/// Practical only for small caps: the number of pieces grows geometrically.
pub fn build_return_partition(
    omega: &OmegaSequence,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
    n_cap: usize,
    min_piece_rel: f64,
) -> Result<ReturnPartition> {
    let params = RunParams { cap: n_cap, min_piece: min_piece_rel * 2.0 * rcfg.delta_star };
    let out = drive(omega, cfg, rcfg, params, None)?;
    Ok(ReturnPartition {
        delta_star: rcfg.delta_star,
        elements: out.elements,
        residual: out.residual,
        n_cap,
        samples: None,
        attempts: out.attempts,
        failures: out.failures,
        stats: out.stats,
    })
}

/// The element of the construction containing `x`, or `None` if the piece
/// of `x` is still unreturned at the cap.
pub fn locate_return(
    omega: &OmegaSequence,
    x: f64,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
    n_cap: usize,
) -> Result<Option<ReturnElement>> {
    Ok(match locate(omega, x, cfg, rcfg, n_cap)? {
        Located::Returned(e) => Some(e),
        Located::Unreturned(_) => None,
    })
}

/// Where the construction puts a point.
#[derive(Clone, Debug, PartialEq)]
pub enum Located {
    Returned(ReturnElement),
    /// The starting interval of the piece alive at the cap, when known.
    Unreturned(Option<Interval>),
}

pub fn locate(
    omega: &OmegaSequence,
    x: f64,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
    n_cap: usize,
) -> Result<Located> {
    if !rcfg.delta_star_interval().contains(x) {
        return Err(Error::Precondition(format!("x = {x} lies outside Δ*")));
    }
    let out = drive(omega, cfg, rcfg, RunParams { cap: n_cap, min_piece: 0.0 }, Some(x))?;
    Ok(match out.elements.into_iter().next() {
        Some(e) => Located::Returned(e),
        None => Located::Unreturned(out.capped),
    })
}

/// Stratified sample of the construction; element masses and the residual
/// are sample fractions of |Δ*|.
pub fn sample_return_partition(
    omega: &OmegaSequence,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
    n_cap: usize,
    sampling: &SampleConfig,
) -> Result<ReturnPartition> {
    let params = RunParams { cap: n_cap, min_piece: 0.0 };
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut elements: Vec<ReturnElement> = Vec::new();
    let mut stats = RunStats::default();
    let (mut attempts, mut failures, mut missed) = (0, 0, 0u64);
    for x in stratified_points(&rcfg.delta_star_interval(), sampling.n_samples, sampling.seed) {
        let out = drive(omega, cfg, rcfg, params, Some(x))?;
        add_stats(&mut stats, &out.stats);
        attempts += out.attempts;
        failures += out.failures;
        match out.elements.into_iter().next() {
            Some(e) => {
                let key = (e.interval.lo.to_bits(), e.interval.hi.to_bits());
                let i = *index.entry(key).or_insert_with(|| {
                    elements.push(e);
                    elements.len() - 1
                });
                elements[i].hits += 1;
            }
            None => missed += 1,
        }
    }
    elements.sort_by(|a, b| a.interval.lo.total_cmp(&b.interval.lo));
    Ok(ReturnPartition {
        delta_star: rcfg.delta_star,
        elements,
        residual: 2.0 * rcfg.delta_star * missed as f64 / sampling.n_samples as f64,
        n_cap,
        samples: Some(sampling.n_samples),
        attempts,
        failures,
        stats,
    })
}

/// `|{τ > n}|` plus the residual.
pub fn return_tail(part: &ReturnPartition, n: usize) -> f64 {
    part.elements.iter().filter(|e| e.tau > n).map(|e| part.mass(e)).sum::<f64>() + part.residual
}

pub fn fit_return_tail(part: &ReturnPartition, n_range: (usize, usize)) -> Result<TailFit> {
    fit_tail(|n| return_tail(part, n), n_range)
}

/// Mass of the elements with exactly `i` escapes whose last escape comes
/// after time `n`.
pub fn escape_history_tail(part: &ReturnPartition, i: usize, n: usize) -> f64 {
    part.elements
        .iter()
        .filter(|e| e.escape_times.len() == i && i > 0 && e.escape_times[i - 1] > n)
        .map(|e| part.mass(e))
        .sum()
}

/// `F_ω(x)` and `τ(x)` for `x` in one of the partition's elements.
pub fn induced_apply(omega: &OmegaSequence, x: f64, part: &ReturnPartition) -> Result<(f64, usize)> {
    let e = part.find(x).ok_or(Error::Unreturned(x))?;
    Ok((e.apply(omega, x)?, e.tau))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Separation {
    /// Induced iterates before the two points fall in different elements.
    pub s: usize,
    /// Set when `s` is only a lower bound.
    pub censored: bool,
    /// Map iterates spent before separating.
    pub elapsed: usize,
}

/// Separation time under the induced map, following each point with
/// [`locate`] on the shifted fibre. Points in different pieces at the cap
/// are separated, since elements refine pieces; points sharing a piece
/// there give a censored time. `omega` must reach `cap · (n_cap + t*)`
/// indices.
pub fn separation_time(
    omega: &OmegaSequence,
    x: f64,
    y: f64,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
    n_cap: usize,
    cap: usize,
) -> Result<Separation> {
    let mut w = omega.clone();
    let (mut x, mut y) = (x, y);
    let mut elapsed = 0;
    for n in 0..cap {
        let lx = locate(&w, x, cfg, rcfg, n_cap)?;
        let ly = locate(&w, y, cfg, rcfg, n_cap)?;
        match (lx, ly) {
            (Located::Returned(a), Located::Returned(b)) if a.interval == b.interval => {
                x = a.apply(&w, x)?.clamp(-rcfg.delta_star, rcfg.delta_star);
                y = a.apply(&w, y)?.clamp(-rcfg.delta_star, rcfg.delta_star);
                elapsed += a.tau;
                w = w.shifted(a.tau as i64);
            }
            (Located::Unreturned(Some(a)), Located::Unreturned(Some(b))) if a != b => {
                return Ok(Separation { s: n, censored: false, elapsed })
            }
            (Located::Unreturned(_), Located::Unreturned(_)) => {
                return Ok(Separation { s: n, censored: true, elapsed })
            }
            _ => return Ok(Separation { s: n, censored: false, elapsed }),
        }
    }
    Ok(Separation { s: cap, censored: true, elapsed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionFit {
    pub pairs: usize,
    pub censored: usize,
    /// `(s, max log-ratio, pair count)` per observed separation time.
    pub envelope: Vec<(usize, f64, usize)>,
    pub d_tilde: f64,
    pub beta_hat: f64,
    pub r2: f64,
    pub decreasing: bool,
}

impl DistortionFit {
    pub fn pass(&self) -> bool {
        self.decreasing && self.beta_hat < 1.0 && self.d_tilde.is_finite()
    }
}

/// Envelope of `|log DF(x)/DF(y)|` against the separation time over pairs
/// drawn inside sampled elements, fitted as `D̃ β̂^s`. Pairs are drawn at
/// log-uniform distances so that longer separation times occur.
pub fn check_induced_distortion(
    omega: &OmegaSequence,
    part: &ReturnPartition,
    cfg: &PartitionConfig,
    rcfg: &FullReturnConfig,
    n_pairs: usize,
    sep_cap: usize,
    seed: u64,
) -> Result<DistortionFit> {
    if sep_cap < 2 {
        return Err(Error::Precondition("sep_cap must be at least 2".into()));
    }
    let weights: Vec<f64> = part.elements.iter().map(|e| part.mass(e).max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if part.elements.is_empty() || total <= 0.0 {
        return Err(Error::Precondition("no returned elements to draw pairs from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut censored = 0;
    for _ in 0..n_pairs {
        let mut u = rng.gen::<f64>() * total;
        let mut idx = 0;
        while idx + 1 < weights.len() && u >= weights[idx] {
            u -= weights[idx];
            idx += 1;
        }
        let e = &part.elements[idx];
        // the pair is drawn as images u, v in Δ*; their pullbacks x, y lie
        // in e and log DF is read off the stable backward orbit
        let (lo, hi) = (-rcfg.delta_star, rcfg.delta_star);
        let u = lo + rng.gen::<f64>() * (hi - lo);
        let h = (hi - lo) * 0.5f64.powi(rng.gen_range(0..=40)) * rng.gen::<f64>();
        let v = if rng.gen::<bool>() { (u + h).min(hi) } else { (u - h).max(lo) };
        if u == v {
            continue;
        }
        let ratio = (e.path.log_expansion_back(omega, u)? - e.path.log_expansion_back(omega, v)?).abs();
        let next = separation_time(&omega.shifted(e.tau as i64), u, v, cfg, rcfg, part.n_cap, sep_cap - 1)?;
        let sep = Separation { s: next.s + 1, censored: next.censored, elapsed: next.elapsed + e.tau };
        if sep.censored {
            censored += 1;
            continue;
        }
        let slot = env.entry(sep.s).or_insert((0.0, 0));
        slot.0 = slot.0.max(ratio);
        slot.1 += 1;
    }
    let envelope: Vec<(usize, f64, usize)> = env.iter().map(|(&s, &(m, c))| (s, m, c)).collect();
    let pairs = envelope.iter().map(|e| e.2).sum();
    if envelope.is_empty() {
        return Err(Error::Fit("no uncensored pairs".into()));
    }
    let decreasing = envelope.windows(2).all(|w| w[1].1 <= w[0].1);
    if envelope.iter().all(|e| e.1 <= 1e-13) {
        return Ok(DistortionFit { pairs, censored, envelope, d_tilde: 0.0, beta_hat: 0.0, r2: 1.0, decreasing: true });
    }
    let pts: Vec<(f64, f64)> = envelope.iter().map(|e| (e.0 as f64, e.1)).collect();
    let (d_tilde, beta_hat, r2) = match fit_log_linear(&pts, 2) {
        Ok((c, rate, r2)) => (c, (-rate).exp(), r2),
        Err(_) => (envelope[0].1, f64::NAN, 0.0),
    };
    Ok(DistortionFit { pairs, censored, envelope, d_tilde, beta_hat, r2, decreasing })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoppingReport {
    pub compared: usize,
    pub mismatches: usize,
}

impl StoppingReport {
    pub fn pass(&self) -> bool {
        self.mismatches == 0
    }
}

/// Compares the elements with `τ <= n` of two partitions built the same way
/// on fibres agreeing up to index `n - 1`; they must coincide bit for bit.
pub fn check_stopping_time(a: &ReturnPartition, b: &ReturnPartition, n: usize) -> StoppingReport {
    let key = |e: &ReturnElement| (e.interval.lo.to_bits(), e.interval.hi.to_bits(), e.tau, e.escape_times.clone(), e.hits);
    let mut ka: Vec<_> = a.elements.iter().filter(|e| e.tau <= n).map(key).collect();
    let mut kb: Vec<_> = b.elements.iter().filter(|e| e.tau <= n).map(key).collect();
    ka.sort();
    kb.sort();
    let compared = ka.len().max(kb.len());
    let mismatches = if ka == kb {
        0
    } else {
        let sa: std::collections::HashSet<_> = ka.iter().cloned().collect();
        let sb: std::collections::HashSet<_> = kb.iter().cloned().collect();
        sa.symmetric_difference(&sb).count()
    };
    StoppingReport { compared, mismatches }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aperiodicity {
    /// Return times realized with positive mass on every sampled fibre.
    pub taus: Vec<usize>,
    /// Smallest mass of `{τ = t_i}` over the fibres.
    pub eps: Vec<f64>,
    pub gcd: usize,
}

impl Aperiodicity {
    pub fn pass(&self) -> bool {
        self.gcd == 1
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn check_aperiodicity(parts: &[&ReturnPartition]) -> Result<Aperiodicity> {
    if parts.len() < 2 {
        return Err(Error::Precondition("need at least two sampled fibres".into()));
    }
    let mut common: Option<BTreeMap<usize, f64>> = None;
    for p in parts {
        let mut m: BTreeMap<usize, f64> = BTreeMap::new();
        for e in &p.elements {
            *m.entry(e.tau).or_insert(0.0) += p.mass(e);
        }
        m.retain(|_, v| *v > 0.0);
        common = Some(match common {
            None => m,
            Some(c) => c.into_iter().filter_map(|(t, v)| m.get(&t).map(|w| (t, v.min(*w)))).collect(),
        });
    }
    let common = common.unwrap_or_default();
    let taus: Vec<usize> = common.keys().copied().collect();
    let eps: Vec<f64> = common.values().copied().collect();
    let g = taus.iter().fold(0, |g, &t| gcd(g, t));
    Ok(Aperiodicity { taus, eps, gcd: g })
}
