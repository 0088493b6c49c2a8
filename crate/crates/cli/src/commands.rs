//! The pipeline stages behind each subcommand. Every command writes CSV
//! artifacts, `summary.txt` and `manifest.txt` into the output directory
//! and returns exit status 0 (all checks pass) or 1 (a check failed).

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;

use lorenz_tower::correlation::{quenched_correlation, CorrelationSeries, MeasureSource, Mode};
use lorenz_tower::escape_engine::{
    build_escape_partition, fit_escape_tail, sample_escape_partition, verify_depth_size_bound,
    verify_escape_depth_relation, EscapeConfig, EscapePartition, SampleConfig,
};
use lorenz_tower::fit::TailFit;
use lorenz_tower::map_family::{validate_local_holder, validate_singularity_order};
use lorenz_tower::measure::{equivariance_residual, estimate_measure_ulam, FiberMeasure};
use lorenz_tower::random_driver::{check_uniform_expansion, expansion_samples, OmegaSequence};
use lorenz_tower::return_engine::{
    build_return_partition, fit_return_tail, sample_return_partition, FullReturnConfig, ReturnPartition,
    RESIDUAL_FLAG,
};
use lorenz_tower::tower::{build_tower, check_tower_conditions, TowerCheckConfig, TowerFibres, TowerReport};
use lorenz_tower::Result;

use crate::config::{BuildMode, RunConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub pass: bool,
    pub summary: String,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// The fibre sequence of ensemble member `k`.
pub fn omega_for(cfg: &RunConfig, k: usize, left: usize, right: usize) -> Result<OmegaSequence> {
    if cfg.family.width() == 0.0 {
        OmegaSequence::constant(cfg.family.lambda_lo, left, right, cfg.family)
    } else {
        OmegaSequence::sample(cfg.seed.wrapping_add(k as u64), left, right, cfg.family)
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn finish(out: &Path, command: &str, cfg: &RunConfig, pass: bool, summary: String) -> Result<Outcome> {
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# lzt {} {command}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "# rerun with: lzt {command} --config manifest.txt");
    manifest.push_str(&cfg.to_text());
    fs::write(out.join("manifest.txt"), manifest)?;
    let summary = format!("{command}: {}\n{summary}", if pass { "pass" } else { "FAIL" });
    fs::write(out.join("summary.txt"), &summary)?;
    Ok(Outcome { pass, summary })
}

fn fmt_fit(f: &Option<TailFit>) -> String {
    match f {
        Some(f) => format!("c={:.4e} rate={:.4e} r2={:.4}", f.c, f.rate, f.r2),
        None => "fit failed".into(),
    }
}

/// `min / median / max` of the fitted rates and the largest ratio to the
/// median in either direction.
fn spread(rates: &[f64]) -> String {
    if rates.is_empty() {
        return "no fitted rates".into();
    }
    let mut r = rates.to_vec();
    r.sort_by(f64::total_cmp);
    let med = if r.len() % 2 == 1 { r[r.len() / 2] } else { 0.5 * (r[r.len() / 2 - 1] + r[r.len() / 2]) };
    let worst = r.iter().map(|&b| (b / med).max(med / b)).fold(1.0, f64::max);
    format!("min={:.4e} median={:.4e} max={:.4e} max_ratio_to_median={:.3}", r[0], med, r[r.len() - 1], worst)
}

pub fn cmd_check_map(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let mut summary = String::new();
    let mut pass = true;
    let mut w = csv::Writer::from_writer(create(out, "map_checks.csv")?);
    w.write_record(["check", "subject", "value", "pass"])?;
    let lams: Vec<f64> = if cfg.family.width() == 0.0 {
        vec![cfg.family.lambda_lo]
    } else {
        (0..5).map(|i| cfg.family.lambda_lo + cfg.family.width() * i as f64 / 4.0).collect()
    };
    for &lam in &lams {
        let p = cfg.family.params(lam)?;
        let s = validate_singularity_order(&p, 200)?;
        let h = validate_local_holder(&p, cfg.check_samples)?;
        w.write_record(["singularity_order", &format!("{lam:?}"), &format!("{:?}", s.c_est), &s.pass.to_string()])?;
        w.write_record(["local_holder", &format!("{lam:?}"), &format!("{:?}", h.k_est), &h.pass.to_string()])?;
        let _ = writeln!(summary, "lambda={lam:.4} C_est={:.4} ({}) K_est={:.4} ({})", s.c_est, ok(s.pass), h.k_est, ok(h.pass));
        pass &= s.pass && h.pass;
    }
    for k in 0..cfg.ensemble {
        let omega = omega_for(cfg, k, 0, cfg.check_n_max)?;
        let x = expansion_samples(cfg.check_samples, 1e-9, cfg.seed.wrapping_add(k as u64));
        let e = check_uniform_expansion(&omega, &x, cfg.check_n_max)?;
        w.write_record(["expansion_ell", &format!("omega{k}"), &format!("{:?}", e.ell), &e.pass.to_string()])?;
        w.write_record(["expansion_c_tilde", &format!("omega{k}"), &format!("{:?}", e.c_tilde), &e.pass.to_string()])?;
        let _ = writeln!(summary, "omega {k}: ell={:.4e} C_tilde={:.4e} ({})", e.ell, e.c_tilde, ok(e.pass));
        pass &= e.pass;
    }
    w.flush()?;
    finish(out, "check-map", cfg, pass, summary)
}

fn ok(p: bool) -> &'static str {
    if p {
        "pass"
    } else {
        "FAIL"
    }
}

struct EscapeRun {
    omega: OmegaSequence,
    part: EscapePartition,
    fit: Option<TailFit>,
    ell: f64,
}

fn run_escape(cfg: &RunConfig, k: usize) -> Result<EscapeRun> {
    let omega = omega_for(cfg, k, 0, cfg.escape.n_cap.max(cfg.check_n_max))?;
    let j0 = cfg.partition.delta0();
    let part = match cfg.escape.mode {
        BuildMode::Sampled => {
            let s = SampleConfig { n_samples: cfg.escape.n_samples, seed: cfg.seed.wrapping_add(k as u64) };
            sample_escape_partition(&omega, j0, &cfg.partition, cfg.escape.n_cap, &s)?
        }
        BuildMode::Exact => {
            let e = EscapeConfig { n_cap: cfg.escape.n_cap, min_piece_rel: cfg.escape.min_piece_rel };
            build_escape_partition(&omega, j0, &cfg.partition, &e)?
        }
    };
    let fit = fit_escape_tail(&part, cfg.escape.fit_range).ok();
    let x = expansion_samples(cfg.check_samples, 1e-9, cfg.seed.wrapping_add(k as u64));
    let ell = check_uniform_expansion(&omega, &x, cfg.check_n_max)?.ell;
    Ok(EscapeRun { omega, part, fit, ell })
}

pub fn cmd_escape(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let runs: Vec<EscapeRun> = (0..cfg.ensemble).into_par_iter().map(|k| run_escape(cfg, k)).collect::<Result<_>>()?;
    let mut summary = String::new();
    let mut pass = true;
    let mut fits = csv::Writer::from_writer(create(out, "escape_fit.csv")?);
    fits.write_record([
        "member", "c", "rate", "r2", "n_lo", "n_hi", "residual", "elements", "size_bound", "depth_relation", "ell",
    ])?;
    let mut rates = Vec::new();
    for (k, r) in runs.iter().enumerate() {
        r.part.write_csv(create(out, &format!("escape_partition_{k}.csv"))?)?;
        let size = verify_depth_size_bound(&r.omega, &r.part.elements)?;
        let depth = verify_escape_depth_relation(&r.part.elements, r.ell);
        let fit_ok = r.fit.is_some_and(|f| f.passes(cfg.min_r2));
        let flagged = r.part.residual > RESIDUAL_FLAG * r.part.j0.len();
        let member_pass = fit_ok && !flagged && size.pass() && depth.pass() && r.ell > 0.0;
        pass &= member_pass;
        if let Some(f) = r.fit {
            rates.push(f.rate);
        }
        let (c, rate, r2) = r.fit.map_or((f64::NAN, f64::NAN, f64::NAN), |f| (f.c, f.rate, f.r2));
        fits.write_record([
            k.to_string(),
            format!("{c:?}"),
            format!("{rate:?}"),
            format!("{r2:?}"),
            cfg.escape.fit_range.0.to_string(),
            cfg.escape.fit_range.1.to_string(),
            format!("{:?}", r.part.residual),
            r.part.elements.len().to_string(),
            size.pass().to_string(),
            depth.pass().to_string(),
            format!("{:?}", r.ell),
        ])?;
        let _ = writeln!(
            summary,
            "omega {k}: {} elements, residual {:.3e}{}, tail {}, size bound {} ({} checked), depth relation {} ({} checked, ell={:.4})",
            r.part.elements.len(),
            r.part.residual / r.part.j0.len(),
            if flagged { " FLAGGED" } else { "" },
            fmt_fit(&r.fit),
            ok(size.pass()),
            size.checked,
            ok(depth.pass()),
            depth.checked,
            r.ell,
        );
    }
    fits.flush()?;
    let _ = writeln!(summary, "escape rate spread: {}", spread(&rates));
    finish(out, "escape", cfg, pass, summary)
}

fn omega_returns(cfg: &RunConfig, rcfg: &FullReturnConfig, k: usize, left: usize) -> Result<OmegaSequence> {
    let right = cfg.tower_sep_cap * (cfg.returns.n_cap + rcfg.t_star) + cfg.returns.n_cap + rcfg.t_star;
    omega_for(cfg, k, left, right)
}

fn return_partition(
    omega: &OmegaSequence,
    cfg: &RunConfig,
    rcfg: &FullReturnConfig,
    seed: u64,
) -> Result<ReturnPartition> {
    match cfg.returns.mode {
        BuildMode::Sampled => {
            let s = SampleConfig { n_samples: cfg.returns.n_samples, seed };
            sample_return_partition(omega, &cfg.partition, rcfg, cfg.returns.n_cap, &s)
        }
        BuildMode::Exact => {
            build_return_partition(omega, &cfg.partition, rcfg, cfg.returns.n_cap, cfg.returns.min_piece_rel)
        }
    }
}

pub fn cmd_returns(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let rcfg = cfg.return_config()?;
    let parts: Vec<ReturnPartition> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|k| {
            let omega = omega_returns(cfg, &rcfg, k, 0)?;
            return_partition(&omega, cfg, &rcfg, cfg.seed.wrapping_add(k as u64))
        })
        .collect::<Result<_>>()?;
    let mut summary = String::new();
    let _ = writeln!(summary, "delta_star={:.6e} bar_delta={:.6e} t_star={}", rcfg.delta_star, rcfg.bar_delta, rcfg.t_star);
    let mut pass = true;
    let mut fits = csv::Writer::from_writer(create(out, "return_fit.csv")?);
    fits.write_record(["member", "c", "b", "r2", "n_lo", "n_hi", "residual_rel", "truncated", "elements", "attempts", "failures"])?;
    let mut rates = Vec::new();
    for (k, p) in parts.iter().enumerate() {
        p.write_csv(create(out, &format!("return_partition_{k}.csv"))?)?;
        let fit = fit_return_tail(p, cfg.returns.fit_range).ok();
        pass &= fit.is_some_and(|f| f.passes(cfg.min_r2)) && !p.truncated();
        if let Some(f) = fit {
            rates.push(f.rate);
        }
        let (c, b, r2) = fit.map_or((f64::NAN, f64::NAN, f64::NAN), |f| (f.c, f.rate, f.r2));
        fits.write_record([
            k.to_string(),
            format!("{c:?}"),
            format!("{b:?}"),
            format!("{r2:?}"),
            cfg.returns.fit_range.0.to_string(),
            cfg.returns.fit_range.1.to_string(),
            format!("{:?}", p.residual / p.measure()),
            p.truncated().to_string(),
            p.elements.len().to_string(),
            p.attempts.to_string(),
            p.failures.to_string(),
        ])?;
        let _ = writeln!(
            summary,
            "omega {k}: {} elements, residual {:.3e} of |Δ*|{}, tail {}",
            p.elements.len(),
            p.residual / p.measure(),
            if p.truncated() { " FLAGGED (truncated at n_cap)" } else { "" },
            fmt_fit(&fit),
        );
    }
    fits.flush()?;
    let _ = writeln!(summary, "b spread: {}", spread(&rates));
    finish(out, "returns", cfg, pass, summary)
}

fn run_tower(cfg: &RunConfig, rcfg: &FullReturnConfig, k: usize) -> Result<(Vec<f64>, f64, TowerReport)> {
    let h = cfg.tower_height;
    let omega = omega_returns(cfg, rcfg, k, h + 1)?;
    let seed = cfg.seed.wrapping_add(k as u64);
    let parts: Vec<ReturnPartition> = if omega.is_constant() {
        // identical fibres; a second sample seed feeds the aperiodicity check
        vec![return_partition(&omega, cfg, rcfg, seed)?, return_partition(&omega, cfg, rcfg, seed ^ 0x9e37_79b9)?]
    } else {
        (0..=h).map(|l| return_partition(&omega.shifted(-(l as i64)), cfg, rcfg, seed)).collect::<Result<_>>()?
    };
    let level_parts: Vec<&ReturnPartition> =
        if omega.is_constant() { vec![&parts[0]; h + 1] } else { parts.iter().collect() };
    let tower = build_tower(&level_parts, h)?;
    let fibres = TowerFibres { omega: &omega, cfg: &cfg.partition, rcfg, n_cap: cfg.returns.n_cap };
    let cc = TowerCheckConfig {
        n_pairs: cfg.tower_pairs,
        sep_cap: cfg.tower_sep_cap,
        tail_range: cfg.returns.fit_range,
        min_r2: cfg.min_r2,
        seed,
        ..Default::default()
    };
    let refs: Vec<&ReturnPartition> = parts.iter().take(2).collect();
    let report = check_tower_conditions(&fibres, &tower, &refs, &cc)?;
    Ok((tower.levels.clone(), tower.truncation, report))
}

pub fn cmd_tower(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let rcfg = cfg.return_config()?;
    let runs: Vec<_> = (0..cfg.ensemble).into_par_iter().map(|k| run_tower(cfg, &rcfg, k)).collect::<Result<_>>()?;
    let mut summary = String::new();
    let mut pass = true;
    let mut levels = csv::Writer::from_writer(create(out, "tower_levels.csv")?);
    levels.write_record(["member", "level", "mass"])?;
    let mut checks = csv::Writer::from_writer(create(out, "tower_checks.csv")?);
    checks.write_record(["member", "condition", "pass", "constant", "value", "note"])?;
    let mut c5_rates = Vec::new();
    for (k, (lv, trunc, rep)) in runs.iter().enumerate() {
        for (l, m) in lv.iter().enumerate() {
            levels.write_record([k.to_string(), l.to_string(), format!("{m:?}")])?;
        }
        for c in &rep.checks {
            let note = c.note.clone().unwrap_or_default();
            if c.constants.is_empty() {
                checks.write_record([k.to_string(), c.name.into(), c.pass.to_string(), String::new(), String::new(), note.clone()])?;
            }
            for (name, v) in &c.constants {
                checks.write_record([k.to_string(), c.name.into(), c.pass.to_string(), name.to_string(), format!("{v:?}"), note.clone()])?;
            }
        }
        if let Some(b) = rep.get("C5").and_then(|c| c.constants.iter().find(|(n, _)| *n == "b")) {
            c5_rates.push(b.1);
        }
        pass &= rep.all_pass();
        let mass: f64 = lv.iter().sum();
        let _ = writeln!(summary, "omega {k}: tower mass {mass:.6e} over {} levels, truncation {trunc:.3e}", lv.len());
        for line in rep.to_string().lines() {
            let _ = writeln!(summary, "  {line}");
        }
    }
    levels.flush()?;
    checks.flush()?;
    let _ = writeln!(summary, "b spread: {}", spread(&c5_rates));
    finish(out, "tower", cfg, pass, summary)
}

struct CorrRun {
    series: Vec<CorrelationSeries>,
    fibers: Vec<FiberMeasure>,
    equivariance: f64,
    converged: bool,
}

fn run_correlations(cfg: &RunConfig, k: usize) -> Result<CorrRun> {
    let n = cfg.corr_n_max;
    let left = n + cfg.burn_in;
    let omega = omega_for(cfg, k, left, n.max(cfg.n_push))?;
    let ulam = estimate_measure_ulam(&omega, cfg.bins, cfg.n_push, cfg.burn_in)?;
    let equivariance = equivariance_residual(&omega, &ulam)?.into_iter().fold(0.0, f64::max);
    let src = MeasureSource::Ulam { bins: cfg.bins, burn_in: cfg.burn_in };
    let mut pairs = vec![(&cfg.phi, &cfg.psi)];
    if cfg.phi != cfg.psi {
        pairs.push((&cfg.psi, &cfg.phi));
    }
    let mut series = Vec::new();
    for (phi, psi) in pairs {
        for mode in [Mode::Forward, Mode::Pullback] {
            series.push(quenched_correlation(&omega, phi, psi, n, &src, mode)?);
        }
    }
    Ok(CorrRun { series, fibers: ulam.fibers, equivariance, converged: ulam.converged })
}

pub fn cmd_correlations(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let runs: Vec<CorrRun> = (0..cfg.ensemble).into_par_iter().map(|k| run_correlations(cfg, k)).collect::<Result<_>>()?;
    let mut summary = String::new();
    let mut pass = true;
    let bound = 2.0 / cfg.bins as f64 + 1e-8;
    let mut all = Vec::new();
    let mut rates = Vec::new();
    for (k, r) in runs.iter().enumerate() {
        CorrelationSeries::write_csv(&r.series, create(out, &format!("correlations_{k}.csv"))?)?;
        FiberMeasure::write_csv(&r.fibers, create(out, &format!("densities_{k}.csv"))?)?;
        let eq_ok = r.equivariance <= bound;
        pass &= eq_ok;
        let _ = writeln!(
            summary,
            "omega {k}: equivariance residual {:.3e} (bound {bound:.3e}) {}, burn-in {}",
            r.equivariance,
            ok(eq_ok),
            if r.converged { "converged" } else { "not converged" }
        );
        for s in &r.series {
            let fit_ok = s.fit.is_some_and(|f| f.passes(cfg.corr_min_r2));
            pass &= fit_ok;
            if let Some(f) = s.fit {
                rates.push(f.rate);
            }
            let _ = writeln!(
                summary,
                "  {} ({}, {}): {} over n in [{}, {}], noise floor {:.3e} {}",
                s.mode,
                s.phi,
                s.psi,
                fmt_fit(&s.fit),
                s.fit.map_or(0, |f| f.n_range.0),
                s.fit.map_or(0, |f| f.n_range.1),
                s.noise_floor,
                ok(fit_ok)
            );
        }
        all.push(r);
    }
    let mut fits = create(out, "correlation_fits.csv")?;
    let series: Vec<CorrelationSeries> = all.iter().flat_map(|r| r.series.iter().cloned()).collect();
    CorrelationSeries::write_fit_csv(&series, &mut fits)?;
    let _ = writeln!(summary, "b spread: {}", spread(&rates));
    finish(out, "correlations", cfg, pass, summary)
}
