//! The random Young tower over the return partitions.
//!
//! A point `(x, ℓ)` of `Δ_ω` sits above `x ∈ Δ*` on the fibre `σ^{-ℓ}ω`,
//! with `ℓ < τ_{σ^{-ℓ}ω}(x)`. The tower map climbs one level per step and
//! drops back to level 0 through the induced map at the top.

use std::fmt;

use crate::error::{Error, Result};
use crate::fit::fit_log_linear;
use crate::interval_partition::PartitionConfig;
use crate::random_driver::{compose, OmegaSequence};
use crate::return_engine::{
    check_aperiodicity, check_induced_distortion, fit_return_tail, locate, return_tail, separation_time,
    FullReturnConfig, Located, ReturnPartition, MARKOV_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TowerPoint {
    pub x: f64,
    pub level: usize,
    /// The tower `Δ_{σ^k ω}` the point lives in.
    pub base_fiber: i64,
}

/// Level masses of `Δ_ω` up to a height cap.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    pub delta_star: f64,
    pub height_cap: usize,
    /// `m({τ_{σ^{-ℓ}ω} > ℓ})` for `ℓ < height_cap`.
    pub levels: Vec<f64>,
    /// Mass of the first level above the cap.
    pub truncation: f64,
}

impl Tower {
    pub fn mass(&self) -> f64 {
        self.levels.iter().sum()
    }

    pub fn truncated(&self) -> bool {
        self.truncation > crate::return_engine::RESIDUAL_FLAG * 2.0 * self.delta_star
    }
}

/// `parts[ℓ]` is the return partition of the fibre `σ^{-ℓ}ω`; at least
/// `height_cap + 1` are needed.
pub fn build_tower(parts: &[&ReturnPartition], height_cap: usize) -> Result<Tower> {
    if height_cap == 0 || parts.len() <= height_cap {
        return Err(Error::Precondition(format!(
            "height cap {height_cap} needs {} partitions, got {}",
            height_cap + 1,
            parts.len()
        )));
    }
    let delta_star = parts[0].delta_star;
    if parts.iter().any(|p| p.delta_star != delta_star) {
        return Err(Error::Precondition("partitions disagree on Δ*".into()));
    }
    let levels = (0..height_cap).map(|l| return_tail(parts[l], l)).collect();
    Ok(Tower { delta_star, height_cap, levels, truncation: return_tail(parts[height_cap], height_cap) })
}

/// What the tower map needs to locate points on any fibre.
#[derive(Clone, Copy, Debug)]
pub struct TowerFibres<'a> {
    pub omega: &'a OmegaSequence,
    pub cfg: &'a PartitionConfig,
    pub rcfg: &'a FullReturnConfig,
    pub n_cap: usize,
}

/// `F̂(x, ℓ)`: climb, or return to level 0 through `T^{ℓ+1}` at the top.
/// Points unreturned at the cap may climb up to level `n_cap`.
pub fn tower_step(pt: TowerPoint, fibres: &TowerFibres) -> Result<TowerPoint> {
    let w = fibres.omega.shifted(pt.base_fiber - pt.level as i64);
    let next = |x, level| TowerPoint { x, level, base_fiber: pt.base_fiber + 1 };
    match locate(&w, pt.x, fibres.cfg, fibres.rcfg, fibres.n_cap)? {
        Located::Returned(e) if pt.level >= e.tau => Err(Error::Precondition(format!(
            "level {} is not below the return time {}",
            pt.level, e.tau
        ))),
        Located::Returned(e) if pt.level + 1 < e.tau => Ok(next(pt.x, pt.level + 1)),
        Located::Returned(e) => {
            let d = fibres.rcfg.delta_star;
            Ok(next(e.apply(&w, pt.x)?.clamp(-d, d), 0))
        }
        Located::Unreturned(_) if pt.level < fibres.n_cap => Ok(next(pt.x, pt.level + 1)),
        Located::Unreturned(_) => Err(Error::Unreturned(pt.x)),
    }
}

/// `π(x, ℓ) = T^ℓ_{σ^{-ℓ}ω'}(x)` with `ω' = σ^{base_fiber}ω`.
pub fn project(pt: TowerPoint, omega: &OmegaSequence) -> Result<f64> {
    if pt.level == 0 {
        return Ok(pt.x);
    }
    let orbit = compose(&omega.shifted(pt.base_fiber - pt.level as i64), pt.x, pt.level)?;
    Ok(orbit[pt.level])
}

/// Pass/fail of one tower condition with the constants behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub pass: bool,
    pub constants: Vec<(&'static str, f64)>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TowerReport {
    pub checks: Vec<ConditionCheck>,
}

impl TowerReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for TowerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            write!(f, "{} {}", c.name, if c.pass { "pass" } else { "FAIL" })?;
            for (k, v) in &c.constants {
                write!(f, " {k}={v:.6e}")?;
            }
            if let Some(n) = &c.note {
                write!(f, " ({n})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TowerCheckConfig {
    /// Elements spot-checked for constant τ and the separation recursion.
    pub c1_elements: usize,
    pub n_pairs: usize,
    pub sep_cap: usize,
    pub tail_range: (usize, usize),
    pub min_r2: f64,
    pub seed: u64,
}

impl Default for TowerCheckConfig {
    fn default() -> Self {
        Self { c1_elements: 40, n_pairs: 2000, sep_cap: 6, tail_range: (10, 60), min_r2: 0.9, seed: 1 }
    }
}

/// Checks (C1)–(C6). `parts[0]` must be the partition of `fibres.omega`;
/// the others are further fibres used for aperiodicity.
pub fn check_tower_conditions(
    fibres: &TowerFibres,
    tower: &Tower,
    parts: &[&ReturnPartition],
    cc: &TowerCheckConfig,
) -> Result<TowerReport> {
    let part = *parts.first().ok_or_else(|| Error::Precondition("no partitions".into()))?;
    Ok(TowerReport {
        checks: vec![
            check_c1(fibres, part, cc)?,
            check_c2(fibres, part)?,
            check_c3(fibres, part, cc)?,
            check_c4(part, tower),
            check_c5(part, cc),
            check_c6(parts),
        ],
    })
}

fn spread_picks(n: usize, k: usize) -> Vec<usize> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}

fn check_c1(fibres: &TowerFibres, part: &ReturnPartition, cc: &TowerCheckConfig) -> Result<ConditionCheck> {
    let (w, cfg, rcfg, cap) = (fibres.omega, fibres.cfg, fibres.rcfg, fibres.n_cap);
    let (mut checked, mut tau_bad, mut rec_bad, mut censored) = (0usize, 0usize, 0usize, 0usize);
    for i in spread_picks(part.elements.len(), cc.c1_elements) {
        let e = &part.elements[i];
        let (x, y) = (e.interval.lo + 0.3 * e.len(), e.interval.lo + 0.7 * e.len());
        for z in [x, y] {
            match locate(w, z, cfg, rcfg, cap)? {
                Located::Returned(f) if f.tau == e.tau && f.interval == e.interval => {}
                _ => tau_bad += 1,
            }
        }
        checked += 1;
        if x == y {
            continue;
        }
        let s = separation_time(w, x, y, cfg, rcfg, cap, cc.sep_cap)?;
        let d = rcfg.delta_star;
        let (fx, fy) = (e.apply(w, x)?.clamp(-d, d), e.apply(w, y)?.clamp(-d, d));
        let s1 = separation_time(&w.shifted(e.tau as i64), fx, fy, cfg, rcfg, cap, cc.sep_cap.saturating_sub(1))?;
        if s.censored || s1.censored {
            censored += 1;
        } else if s.s != s1.s + 1 || s.elapsed != s1.elapsed + e.tau {
            rec_bad += 1;
        }
    }
    Ok(ConditionCheck {
        name: "C1",
        pass: checked > 0 && tau_bad == 0 && rec_bad == 0,
        constants: vec![
            ("elements", checked as f64),
            ("tau_mismatch", tau_bad as f64),
            ("recursion_mismatch", rec_bad as f64),
            ("censored", censored as f64),
        ],
        note: (checked == 0).then(|| "no returned elements".into()),
    })
}

/// The carving error is the contract; the error seen from time-0
/// coordinates includes the rounding of the endpoints amplified by `DF`.
fn check_c2(fibres: &TowerFibres, part: &ReturnPartition) -> Result<ConditionCheck> {
    let d = part.delta_star;
    let (mut carve, mut from_origin): (f64, f64) = (0.0, 0.0);
    for e in &part.elements {
        carve = carve.max(e.image_error);
        let lo = e.apply(fibres.omega, e.interval.lo)?;
        let hi = e.apply(fibres.omega, e.interval.hi)?;
        from_origin = from_origin.max((lo + d).abs()).max((hi - d).abs());
    }
    Ok(ConditionCheck {
        name: "C2",
        pass: !part.elements.is_empty() && carve <= MARKOV_TOL,
        constants: vec![
            ("elements", part.elements.len() as f64),
            ("max_endpoint_error", carve),
            ("time0_endpoint_error", from_origin),
        ],
        note: None,
    })
}

fn check_c3(fibres: &TowerFibres, part: &ReturnPartition, cc: &TowerCheckConfig) -> Result<ConditionCheck> {
    let fit = check_induced_distortion(fibres.omega, part, fibres.cfg, fibres.rcfg, cc.n_pairs, cc.sep_cap, cc.seed);
    Ok(match fit {
        Ok(f) => ConditionCheck {
            name: "C3",
            pass: f.pass(),
            constants: vec![
                ("d_tilde", f.d_tilde),
                ("beta_hat", f.beta_hat),
                ("pairs", f.pairs as f64),
                ("censored", f.censored as f64),
            ],
            note: (!f.decreasing).then(|| "envelope not decreasing".into()),
        },
        Err(e) => ConditionCheck { name: "C3", pass: false, constants: Vec::new(), note: Some(e.to_string()) },
    })
}

/// Widest element still climbing at each level, as a geometric trend.
fn check_c4(part: &ReturnPartition, tower: &Tower) -> ConditionCheck {
    let widths: Vec<(f64, f64)> = (0..tower.height_cap)
        .filter_map(|l| {
            part.elements
                .iter()
                .filter(|e| e.tau > l)
                .map(|e| e.len())
                .max_by(f64::total_cmp)
                .map(|w| (l as f64, w))
        })
        .collect();
    let decreasing = widths.windows(2).all(|p| p[1].1 <= p[0].1);
    match fit_log_linear(&widths, 2) {
        Ok((c, rate, r2)) => ConditionCheck {
            name: "C4",
            pass: decreasing && rate > 0.0,
            constants: vec![("c", c), ("rate", rate), ("r2", r2)],
            note: None,
        },
        Err(e) => ConditionCheck { name: "C4", pass: false, constants: Vec::new(), note: Some(e.to_string()) },
    }
}

fn check_c5(part: &ReturnPartition, cc: &TowerCheckConfig) -> ConditionCheck {
    let note = part.truncated().then(|| {
        format!("censored: residual {:.3e} of |Δ*| unreturned at n_cap = {}", part.residual / part.measure(), part.n_cap)
    });
    match fit_return_tail(part, cc.tail_range) {
        Ok(f) => ConditionCheck {
            name: "C5",
            pass: f.passes(cc.min_r2),
            constants: vec![("c", f.c), ("b", f.rate), ("r2", f.r2)],
            note,
        },
        Err(e) => ConditionCheck { name: "C5", pass: false, constants: Vec::new(), note: Some(e.to_string()) },
    }
}

fn check_c6(parts: &[&ReturnPartition]) -> ConditionCheck {
    match check_aperiodicity(parts) {
        Ok(a) => {
            let eps_min = a.eps.iter().copied().fold(f64::INFINITY, f64::min);
            ConditionCheck {
                name: "C6",
                pass: a.pass() && eps_min > 0.0,
                constants: vec![("gcd", a.gcd as f64), ("return_times", a.taus.len() as f64), ("eps_min", eps_min)],
                note: None,
            }
        }
        Err(e) => ConditionCheck { name: "C6", pass: false, constants: Vec::new(), note: Some(e.to_string()) },
    }
}
