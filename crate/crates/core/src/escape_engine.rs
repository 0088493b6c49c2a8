//! The escape partition: chopping at essential returns until every piece
//! escapes, that is, reaches length at least δ away from Δ0.

use std::collections::HashMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::fit::{fit_tail, TailFit};
use crate::interval_partition::{Interval, PartitionConfig};
use crate::map_family::Branch;
use crate::pieces::{apply_branch, stratified_points, EventKind, Piece, RunParams, Runner};
pub use crate::pieces::RunStats;
use crate::random_driver::OmegaSequence;

pub use crate::pieces::{Event as ItineraryEvent, EventKind as ItineraryKind, SidePath};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EscapeConfig {
    pub n_cap: usize,
    /// Pieces lighter than `min_piece_rel * |J0|` are dropped to the residual.
    pub min_piece_rel: f64,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        Self { n_cap: 200, min_piece_rel: 1e-13 }
    }
}

/// Stratified point sampling of a partition: one point per stratum, each
/// followed through the construction alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub seed: u64,
}

/// Relative width below which an interval is treated as unresolved.
pub const UNRESOLVED_REL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct EscapeElement {
    pub id: u64,
    pub interval: Interval,
    pub escape_time: usize,
    pub total_depth: u64,
    /// Returns followed by the escape; free iterates are not listed.
    pub itinerary: Vec<ItineraryEvent>,
    pub ancestors: Vec<u64>,
    pub path: SidePath,
    /// Sample points that landed here (sampled partitions only).
    pub hits: u64,
}

impl EscapeElement {
    fn from_piece(p: Piece) -> Self {
        Self {
            id: p.id,
            interval: p.orig,
            escape_time: p.time - p.start,
            total_depth: p.total_depth(),
            itinerary: p.events,
            ancestors: p.ancestors,
            path: p.path,
            hits: 0,
        }
    }

    pub fn len(&self) -> f64 {
        self.interval.len()
    }

    /// `log |J|`. Elements narrower than f64 can resolve at their position
    /// are measured as `log |T^E J| - log |DT^E|` along the pulled-back
    /// midpoint of the escape image.
    pub fn log_len(&self, omega: &OmegaSequence) -> Result<f64> {
        let scale = self.interval.lo.abs().max(self.interval.hi.abs());
        if self.len() > UNRESOLVED_REL * scale {
            return Ok(self.len().ln());
        }
        let img = self.escape_image();
        Ok(img.len().ln() - self.path.log_expansion_back(omega, img.mid())?)
    }

    /// Distortion of `T^E` on the element: spread of `log |DT^E|` over the
    /// pullbacks of the endpoints and `samples` equally spaced interior
    /// points of the escape image.
    pub fn itinerary_distortion(&self, omega: &OmegaSequence, samples: usize) -> Result<f64> {
        let img = self.escape_image();
        let n = samples + 2;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let y = if i == n - 1 { img.hi } else { img.lo + img.len() * i as f64 / (n - 1) as f64 };
            let v = self.path.log_expansion_back(omega, y)?;
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            return Err(Error::Precondition("no regular sample point in the element".into()));
        }
        Ok(hi - lo)
    }

    pub fn returns(&self) -> usize {
        self.itinerary.iter().filter(|e| e.kind != EventKind::Escape).count()
    }

    pub fn escape_image(&self) -> Interval {
        self.itinerary.last().map(|e| e.image).unwrap_or(self.interval)
    }

    /// `I5@3 E7@9 X@12`: inessential, essential and escape events.
    pub fn digest(&self) -> String {
        self.itinerary
            .iter()
            .map(|e| match e.kind {
                EventKind::Inessential => format!("I{}@{}", e.depth, e.time),
                EventKind::Essential => format!("E{}@{}", e.depth, e.time),
                EventKind::Escape => format!("X@{}", e.time),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct EscapePartition {
    pub j0: Interval,
    pub elements: Vec<EscapeElement>,
    /// Mass that did not escape by the cap or was pruned.
    pub residual: f64,
    pub n_cap: usize,
    pub stats: RunStats,
    /// Number of sample points when the partition was sampled.
    pub samples: Option<usize>,
}

impl EscapePartition {
    /// Measure attributed to `e`: its length, or its share of the samples.
    pub fn mass(&self, e: &EscapeElement) -> f64 {
        match self.samples {
            Some(n) => self.j0.len() * e.hits as f64 / n as f64,
            None => e.len(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.elements.iter().map(|e| self.mass(e)).sum::<f64>() + self.residual
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["element_id", "lo", "hi", "E", "R", "ancestor_id", "itinerary"])?;
        for e in &self.elements {
            out.write_record([
                e.id.to_string(),
                format!("{:?}", e.interval.lo),
                format!("{:?}", e.interval.hi),
                e.escape_time.to_string(),
                e.total_depth.to_string(),
                e.ancestors.last().map(|a| a.to_string()).unwrap_or_default(),
                e.digest(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Builds the escape partition of `J0`. `J0` must either avoid Δ0 with
/// `|J0| >= δ/5`, or be Δ0 itself.
pub fn build_escape_partition(
    omega: &OmegaSequence,
    j0: Interval,
    cfg: &PartitionConfig,
    ecfg: &EscapeConfig,
) -> Result<EscapePartition> {
    check_j0(&j0, cfg)?;
    omega.ensure_forward(0, ecfg.n_cap)?;
    let params = RunParams { cap: ecfg.n_cap, min_piece: ecfg.min_piece_rel * j0.len() };
    let mut runner = Runner::new(omega, cfg, params);
    runner.seed(j0);
    let mut elements = Vec::new();
    runner.run(|_, p| {
        elements.push(EscapeElement::from_piece(p));
        Ok(())
    })?;
    elements.sort_by(|a, b| a.interval.lo.total_cmp(&b.interval.lo));
    Ok(EscapePartition { j0, elements, residual: runner.residual, n_cap: ecfg.n_cap, stats: runner.stats, samples: None })
}

fn check_j0(j0: &Interval, cfg: &PartitionConfig) -> Result<()> {
    let d = cfg.delta();
    let is_delta0 = j0.lo == -d && j0.hi == d;
    if !is_delta0 && (cfg.meets_delta0(j0) || j0.len() < d / 5.0) {
        return Err(Error::Precondition(format!(
            "J0 = [{}, {}] must avoid Δ0 with length at least δ/5, or equal Δ0",
            j0.lo, j0.hi
        )));
    }
    Ok(())
}

/// Follows stratified sample points of `J0` one at a time. Elements are
/// exactly those the full construction produces; their masses and the
/// residual are sample estimates.
pub fn sample_escape_partition(
    omega: &OmegaSequence,
    j0: Interval,
    cfg: &PartitionConfig,
    n_cap: usize,
    sampling: &SampleConfig,
) -> Result<EscapePartition> {
    check_j0(&j0, cfg)?;
    omega.ensure_forward(0, n_cap)?;
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut elements: Vec<EscapeElement> = Vec::new();
    let mut stats = RunStats::default();
    let mut missed = 0u64;
    for x in stratified_points(&j0, sampling.n_samples, sampling.seed) {
        let mut runner = Runner::new(omega, cfg, RunParams { cap: n_cap, min_piece: 0.0 });
        runner.focus = Some(x);
        runner.seed(j0);
        let mut found = None;
        runner.run(|_, p| {
            found = Some(p);
            Ok(())
        })?;
        add_stats(&mut stats, &runner.stats);
        match found {
            Some(p) => {
                let key = (p.orig.lo.to_bits(), p.orig.hi.to_bits());
                let i = *index.entry(key).or_insert_with(|| {
                    elements.push(EscapeElement::from_piece(p));
                    elements.len() - 1
                });
                elements[i].hits += 1;
            }
            None => missed += 1,
        }
    }
    elements.sort_by(|a, b| a.interval.lo.total_cmp(&b.interval.lo));
    let residual = j0.len() * missed as f64 / sampling.n_samples as f64;
    Ok(EscapePartition { j0, elements, residual, n_cap, stats, samples: Some(sampling.n_samples) })
}

pub(crate) fn add_stats(acc: &mut RunStats, s: &RunStats) {
    acc.steps += s.steps;
    acc.chops += s.chops;
    acc.children += s.children;
    acc.zero_splits += s.zero_splits;
    acc.pullbacks += s.pullbacks;
}

/// `|{E >= n}|` plus the residual.
pub fn escape_tail(part: &EscapePartition, n: usize) -> f64 {
    part.elements.iter().filter(|e| e.escape_time >= n).map(|e| part.mass(e)).sum::<f64>() + part.residual
}

pub fn fit_escape_tail(part: &EscapePartition, n_range: (usize, usize)) -> Result<TailFit> {
    fit_tail(|n| escape_tail(part, n), n_range)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub checked: usize,
    /// Largest value of the checked quantity (must be `<= 0` to pass).
    pub max_excess: f64,
    /// Ids of violating elements.
    pub offenders: Vec<u64>,
}

impl BoundReport {
    pub fn pass(&self) -> bool {
        self.offenders.is_empty()
    }
}

/// `log|J| + R/2 <= 0` for every element with `R > 0`, with `log|J|` from
/// [`EscapeElement::log_len`].
pub fn verify_depth_size_bound(omega: &OmegaSequence, elements: &[EscapeElement]) -> Result<BoundReport> {
    let mut rep = BoundReport { checked: 0, max_excess: f64::NEG_INFINITY, offenders: Vec::new() };
    for e in elements.iter().filter(|e| e.total_depth > 0) {
        rep.checked += 1;
        let v = e.log_len(omega)? + 0.5 * e.total_depth as f64;
        rep.max_excess = rep.max_excess.max(v);
        if v > 0.0 {
            rep.offenders.push(e.id);
        }
    }
    Ok(rep)
}

/// `E <= ((2+ℓ)/ℓ) R + 1` for every element with at least one return.
pub fn verify_escape_depth_relation(elements: &[EscapeElement], ell: f64) -> BoundReport {
    let mut rep = BoundReport { checked: 0, max_excess: f64::NEG_INFINITY, offenders: Vec::new() };
    let k = (2.0 + ell) / ell;
    for e in elements.iter().filter(|e| e.returns() > 0) {
        rep.checked += 1;
        let v = e.escape_time as f64 - (k * e.total_depth as f64 + 1.0);
        rep.max_excess = rep.max_excess.max(v);
        if v > 0.0 {
            rep.offenders.push(e.id);
        }
    }
    rep
}

/// `log |DT^k_ω|` at `x` along the given sides; `None` on a singular orbit.
fn log_derivative_along(omega: &OmegaSequence, sides: &[Branch], x: f64) -> Result<Option<f64>> {
    let mut y = x;
    let mut acc = 0.0;
    for (j, &b) in sides.iter().enumerate() {
        let p = omega.params(j as i64)?;
        if y == 0.0 && p.lambda < 1.0 {
            return Ok(None);
        }
        acc += p.log_slope(y);
        y = apply_branch(p, b, y);
    }
    Ok(acc.is_finite().then_some(acc))
}

/// `max log |DT^k(x)| / |DT^k(y)|` over the endpoints and `samples`
/// equally spaced interior points of `J`. Branches are taken from the
/// midpoint orbit, so `J` must stay on one side of 0 up to time `k`.
pub fn distortion(omega: &OmegaSequence, j: &Interval, k: usize, samples: usize) -> Result<f64> {
    omega.ensure_forward(0, k)?;
    let mut sides = Vec::with_capacity(k);
    let mut y = j.mid();
    for t in 0..k {
        let b = Branch::of(y);
        sides.push(b);
        y = apply_branch(omega.params(t as i64)?, b, y);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let n = samples + 2;
    for i in 0..n {
        let x = if i == 0 {
            j.lo
        } else if i == n - 1 {
            j.hi
        } else {
            j.lo + j.len() * i as f64 / (n - 1) as f64
        };
        if let Some(v) = log_derivative_along(omega, &sides, x)? {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Err(Error::Precondition("no regular sample point in J".into()));
    }
    Ok(hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval_partition::CellId;
    use crate::random_driver::FamilyRange;

    fn cfg() -> PartitionConfig {
        PartitionConfig::new(3, 6, 0.45).unwrap()
    }

    #[test]
    fn doubling_escape_in_one_step() {
        let c = cfg();
        let w = OmegaSequence::calibration(0, 250);
        let d = c.delta();
        let j0 = Interval::new(0.1, 0.1 + d).unwrap();
        let part = build_escape_partition(&w, j0, &c, &EscapeConfig::default()).unwrap();
        assert_eq!(part.elements.len(), 1);
        let e = &part.elements[0];
        assert_eq!(e.escape_time, 1);
        assert_eq!(e.interval, j0);
        assert!((e.escape_image().len() - 2.0 * d).abs() < 1e-15);
        assert_eq!(part.residual, 0.0);
    }

    fn small_delta0_run() -> (PartitionConfig, OmegaSequence, EscapePartition) {
        let c = cfg();
        let w = OmegaSequence::calibration(0, 250);
        let part =
            build_escape_partition(&w, c.delta0(), &c, &EscapeConfig { n_cap: 12, min_piece_rel: 1e-6 }).unwrap();
        (c, w, part)
    }

    #[test]
    fn doubling_from_delta0_conserves_mass() {
        let (c, _, part) = small_delta0_run();
        let total = 2.0 * c.delta();
        assert!((part.total_mass() - total).abs() < 1e-10 * total);
        for w2 in part.elements.windows(2) {
            assert!(w2[0].interval.hi <= w2[1].interval.lo);
        }
        for e in &part.elements {
            let img = e.escape_image();
            assert!(img.len() >= c.delta());
            assert!(!c.meets_delta0(&img));
        }
    }

    #[test]
    fn sampled_elements_match_the_full_construction() {
        let (c, w, part) = small_delta0_run();
        let s = SampleConfig { n_samples: 400, seed: 9 };
        let sampled = sample_escape_partition(&w, c.delta0(), &c, 12, &s).unwrap();
        assert!((sampled.total_mass() - 2.0 * c.delta()).abs() < 1e-12);
        let hits: u64 = sampled.elements.iter().map(|e| e.hits).sum();
        assert!(hits <= 400);
        let mut matched = 0;
        for e in sampled.elements.iter().filter(|e| e.len() > 1e-5 * part.j0.len()) {
            let twin = part.elements.iter().find(|f| f.interval == e.interval).expect("element missing");
            assert_eq!(twin.escape_time, e.escape_time);
            assert_eq!(twin.digest(), e.digest());
            matched += 1;
        }
        assert!(matched > 10);
    }

    #[test]
    fn chop_of_a_full_level() {
        // J0 chosen so that its first image is exactly I_4
        let c = cfg();
        let w = OmegaSequence::calibration(0, 250);
        let lo = ((-5f64).exp() + 0.5) / 2.0;
        let hi = ((-4f64).exp() + 0.5) / 2.0;
        let j0 = Interval::new(lo, hi).unwrap();
        let mut runner = Runner::new(&w, &c, RunParams { cap: 10, min_piece: 0.0 });
        runner.seed(j0);
        let mut p = runner.stack.pop().unwrap();
        runner.step(&mut p).unwrap();
        p.image = Interval::raw((-5f64).exp(), (-4f64).exp());
        let children = runner.chop_pieces(p).unwrap();
        assert_eq!(children.len(), 64);
        for (m, ch) in children.iter().enumerate() {
            let cell = c.interval_of(CellId { r: 4, m: m as u64 + 1 }).unwrap();
            assert_eq!(ch.image, cell);
            assert!((2.0 * ch.orig.lo - 0.5 - cell.lo).abs() < 1e-15);
            assert_eq!(ch.events.last().unwrap().depth, 4);
        }
        for w2 in children.windows(2) {
            assert_eq!(w2[0].orig.hi, w2[1].orig.lo);
        }
        assert_eq!(children[0].orig.lo, j0.lo);
        assert_eq!(children[63].orig.hi, j0.hi);
    }

    #[test]
    fn escape_tail_edges() {
        let (c, _, part) = small_delta0_run();
        assert!((escape_tail(&part, 0) - 2.0 * c.delta()).abs() < 1e-12);
        assert_eq!(escape_tail(&part, 13), part.residual);
    }

    #[test]
    fn depth_relation_example() {
        let e = EscapeElement {
            id: 0,
            interval: Interval::raw(0.1, 0.2),
            escape_time: 12,
            total_depth: 3,
            itinerary: vec![
                ItineraryEvent { time: 2, kind: EventKind::Inessential, depth: 3, image: Interval::raw(0.0, 0.01) },
                ItineraryEvent { time: 12, kind: EventKind::Escape, depth: 0, image: Interval::raw(0.1, 0.2) },
            ],
            ancestors: vec![],
            path: SidePath::new(),
            hits: 0,
        };
        let ell = 2f64.ln();
        assert!(verify_escape_depth_relation(std::slice::from_ref(&e), ell).pass());
        let mut bad = e.clone();
        bad.escape_time = 13;
        assert!(!verify_escape_depth_relation(&[bad], ell).pass());
        let mut no_returns = e.clone();
        no_returns.itinerary.remove(0);
        no_returns.total_depth = 0;
        no_returns.escape_time = 100;
        assert_eq!(verify_escape_depth_relation(&[no_returns.clone()], ell).checked, 0);
        let w = OmegaSequence::calibration(0, 20);
        assert_eq!(verify_depth_size_bound(&w, &[no_returns]).unwrap().checked, 0);
        let mut tight = e;
        tight.total_depth = 10;
        tight.interval = Interval::raw(0.0, (-10f64).exp());
        let rep = verify_depth_size_bound(&w, &[tight]).unwrap();
        assert!(rep.pass() && (rep.max_excess + 5.0).abs() < 1e-12);
    }

    #[test]
    fn log_space_length_matches_resolved_length() {
        let w = OmegaSequence::calibration(0, 80);
        let cfg = PartitionConfig::new(3, 6, 0.45).unwrap();
        let s = SampleConfig { n_samples: 500, seed: 3 };
        let part = sample_escape_partition(&w, cfg.delta0(), &cfg, 60, &s).unwrap();
        assert!(!part.elements.is_empty());
        for e in &part.elements {
            let img = e.escape_image();
            let back = img.len().ln() - e.path.log_expansion_back(&w, img.mid()).unwrap();
            let tol = 64.0 * f64::EPSILON / e.len() + 1e-9;
            assert!((back - e.len().ln()).abs() < tol, "{back} vs {}", e.len().ln());
        }
    }

    #[test]
    fn distortion_examples() {
        let w = OmegaSequence::calibration(0, 20);
        let j = Interval::raw(0.11, 0.13);
        assert_eq!(distortion(&w, &j, 3, 50).unwrap(), 0.0);

        let r = FamilyRange::constant(0.75, 0.25).unwrap();
        let w = OmegaSequence::constant(0.75, 0, 20, r).unwrap();
        let c = cfg();
        let cell = c.interval_of(CellId { r: 5, m: 7 }).unwrap();
        let d = distortion(&w, &cell, 1, 50).unwrap();
        let closed = 0.25 * (cell.hi / cell.lo).ln();
        assert!((d - closed).abs() < 1e-12);
        let sub = Interval::raw(cell.lo + 0.3 * cell.len(), cell.hi - 0.2 * cell.len());
        assert!(distortion(&w, &sub, 1, 50).unwrap() <= d + 1e-12);
    }
}
