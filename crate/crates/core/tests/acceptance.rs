//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any of them fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lorenz_tower::correlation::{quenched_correlation, MeasureSource, Mode, Observable};
use lorenz_tower::escape_engine::{
    fit_escape_tail, sample_escape_partition, verify_depth_size_bound, verify_escape_depth_relation, EscapePartition,
    SampleConfig,
};
use lorenz_tower::interval_partition::PartitionConfig;
use lorenz_tower::measure::{equivariance_residual, estimate_measure_ulam, FiberMeasure};
use lorenz_tower::random_driver::{check_uniform_expansion, expansion_samples, FamilyRange, OmegaSequence, ScaleRule};
use lorenz_tower::return_engine::{
    check_aperiodicity, check_induced_distortion, check_stopping_time, fit_return_tail, sample_return_partition,
    FullReturnConfig, ReturnPartition, MARKOV_TOL,
};

const ENSEMBLE: u64 = 10;
const ESCAPE_CAP: usize = 200;
const RETURN_CAP: usize = 80;
const SAMPLES: usize = 20_000;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn family() -> FamilyRange {
    FamilyRange::new(0.55, 0.95, ScaleRule::FullBranch, 0.45).unwrap()
}

fn partition_config() -> PartitionConfig {
    PartitionConfig::new(3, 6, 0.45).unwrap()
}

fn within(t: Instant, budget: u64) -> (bool, Duration) {
    let e = t.elapsed();
    (e <= Duration::from_secs(budget), e)
}

fn calibration_correlations() -> Line {
    let t = Instant::now();
    let w = OmegaSequence::calibration(20, 20);
    let x = Observable::Coordinate;
    let src = MeasureSource::Ulam { bins: 1 << 14, burn_in: 2 };
    let s = quenched_correlation(&w, &x, &x, 10, &src, Mode::Forward).unwrap();
    let worst = (1..=10)
        .map(|n| {
            let exact = 0.5f64.powi(n as i32) / 12.0;
            (s.values[n] - exact).abs() / 0.5f64.powi(n as i32)
        })
        .fold(0.0, f64::max);
    let (fast, e) = within(t, 60);
    Line {
        id: 1,
        name: "calibration correlations",
        pass: worst <= 1e-3 && fast,
        detail: format!("max |C_n - 2^-n/12| / 2^-n = {worst:.3e} (limit 1e-3), {e:.2?}"),
    }
}

fn calibration_measure() -> Line {
    let t = Instant::now();
    let w = OmegaSequence::calibration(10, 1);
    let run = estimate_measure_ulam(&w, 4096, 0, 10).unwrap();
    let d = run.fibers[0].l1_distance(&FiberMeasure::uniform(0, 4096)).unwrap();
    let (fast, e) = within(t, 10);
    Line {
        id: 2,
        name: "calibration invariant measure",
        pass: d <= 1e-3 && fast,
        detail: format!("L1 distance to Lebesgue {d:.3e} (limit 1e-3), {e:.2?}"),
    }
}

struct EscapeMember {
    omega: OmegaSequence,
    part: EscapePartition,
    ell: f64,
}

fn escape_ensemble() -> (Vec<EscapeMember>, Line) {
    let t = Instant::now();
    let cfg = partition_config();
    let mut members = Vec::new();
    let mut worst_r2 = f64::INFINITY;
    let mut min_rate = f64::INFINITY;
    let mut ok = true;
    for k in 0..ENSEMBLE {
        let omega = OmegaSequence::sample(1 + k, 0, ESCAPE_CAP + 50, family()).unwrap();
        let s = SampleConfig { n_samples: SAMPLES, seed: 1 + k };
        let part = sample_escape_partition(&omega, cfg.delta0(), &cfg, ESCAPE_CAP, &s).unwrap();
        match fit_escape_tail(&part, (5, 40)) {
            Ok(f) => {
                ok &= f.passes(0.9);
                worst_r2 = worst_r2.min(f.r2);
                min_rate = min_rate.min(f.rate);
            }
            Err(_) => ok = false,
        }
        let x = expansion_samples(2000, 1e-9, 1 + k);
        let ell = check_uniform_expansion(&omega, &x, 50).unwrap().ell;
        members.push(EscapeMember { omega, part, ell });
    }
    let (fast, e) = within(t, 300);
    let line = Line {
        id: 3,
        name: "escape-tail fit",
        pass: ok && fast,
        detail: format!("{ENSEMBLE} omega: min rate {min_rate:.4e}, min r2 {worst_r2:.4} on n in [5, 40], {e:.2?}"),
    };
    (members, line)
}

fn size_bound(members: &[EscapeMember]) -> Line {
    let (mut checked, mut bad, mut worst) = (0, 0, f64::NEG_INFINITY);
    for m in members {
        let r = verify_depth_size_bound(&m.omega, &m.part.elements).unwrap();
        checked += r.checked;
        bad += r.offenders.len();
        worst = worst.max(r.max_excess);
    }
    Line {
        id: 5,
        name: "size bound log|J| + R/2 <= 0",
        pass: bad == 0 && checked > 0,
        detail: format!("{checked} elements, {bad} violations, max excess {worst:.4}"),
    }
}

fn depth_bound(members: &[EscapeMember]) -> Line {
    let (mut checked, mut bad, mut worst) = (0, 0, f64::NEG_INFINITY);
    let mut min_ell = f64::INFINITY;
    for m in members {
        let r = verify_escape_depth_relation(&m.part.elements, m.ell);
        checked += r.checked;
        bad += r.offenders.len();
        worst = worst.max(r.max_excess);
        min_ell = min_ell.min(m.ell);
    }
    Line {
        id: 6,
        name: "escape-depth bound",
        pass: bad == 0 && checked > 0 && min_ell > 0.0,
        detail: format!("{checked} elements, {bad} violations, max excess {worst:.4}, min ell {min_ell:.4}"),
    }
}

fn distortion(members: &[EscapeMember]) -> Line {
    let t = Instant::now();
    let max_at = |samples: usize| {
        members
            .iter()
            .flat_map(|m| m.part.elements.iter().map(|e| e.itinerary_distortion(&m.omega, samples).unwrap()))
            .fold(0.0, f64::max)
    };
    let d1 = max_at(16);
    let d2 = max_at(32);
    let change = (d2 - d1).abs() / d1;
    let cfg = partition_config();
    let cal = OmegaSequence::calibration(0, 100);
    let s = SampleConfig { n_samples: 2000, seed: 1 };
    let part = sample_escape_partition(&cal, cfg.delta0(), &cfg, 80, &s).unwrap();
    let d_cal = part.elements.iter().map(|e| e.itinerary_distortion(&cal, 16).unwrap()).fold(0.0, f64::max);
    Line {
        id: 7,
        name: "distortion",
        pass: d1.is_finite() && d2.is_finite() && change <= 0.05 && d_cal == 0.0,
        detail: format!(
            "max {d1:.4} at 16 samples, {d2:.4} at 32 (change {:.2}%), calibration {d_cal:e}, {:.2?}",
            100.0 * change,
            t.elapsed()
        ),
    }
}

struct ReturnMember {
    omega: OmegaSequence,
    part: ReturnPartition,
}

fn return_window(rcfg: &FullReturnConfig) -> usize {
    6 * (RETURN_CAP + rcfg.t_star) + RETURN_CAP + rcfg.t_star
}

fn return_ensemble() -> (Vec<ReturnMember>, Line) {
    let t = Instant::now();
    let cfg = partition_config();
    let rcfg = FullReturnConfig::for_range(&cfg, &family()).unwrap();
    let mut members = Vec::new();
    let mut rates = Vec::new();
    let mut ok = true;
    let mut worst_r2 = f64::INFINITY;
    let mut residual = 0.0f64;
    for k in 0..ENSEMBLE {
        let omega = OmegaSequence::sample(1 + k, 0, return_window(&rcfg), family()).unwrap();
        let s = SampleConfig { n_samples: SAMPLES, seed: 1 + k };
        let part = sample_return_partition(&omega, &cfg, &rcfg, RETURN_CAP, &s).unwrap();
        match fit_return_tail(&part, (10, 60)) {
            Ok(f) => {
                ok &= f.passes(0.9);
                worst_r2 = worst_r2.min(f.r2);
                rates.push(f.rate);
            }
            Err(_) => ok = false,
        }
        residual = residual.max(part.residual / part.measure());
        members.push(ReturnMember { omega, part });
    }
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        f64::NAN
    } else {
        0.5 * (sorted[(sorted.len() - 1) / 2] + sorted[sorted.len() / 2])
    };
    let spread = rates.iter().map(|&b| (b / median).max(median / b)).fold(1.0, f64::max);
    let (fast, e) = within(t, 600);
    let line = Line {
        id: 4,
        name: "return-tail fit",
        pass: ok && rates.len() == ENSEMBLE as usize && spread <= 3.0 && fast,
        detail: format!(
            "{ENSEMBLE} omega: median b {median:.4e}, max ratio to median {spread:.3}, min r2 {worst_r2:.4}, \
             unreturned mass at cap up to {residual:.3} of |Δ*|, {e:.2?}"
        ),
    };
    (members, line)
}

fn markov(members: &[ReturnMember]) -> Line {
    let t = Instant::now();
    let cfg = partition_config();
    let rcfg = FullReturnConfig::for_range(&cfg, &family()).unwrap();
    let (mut n, mut worst) = (0, 0.0f64);
    for m in members {
        for e in &m.part.elements {
            n += 1;
            worst = worst.max(e.image_error);
        }
    }
    let m = &members[0];
    let fit = check_induced_distortion(&m.omega, &m.part, &cfg, &rcfg, 20_000, 6, 1).unwrap();
    let beta_ok = fit.beta_hat > 0.0 && fit.beta_hat < 1.0;
    let env: Vec<String> = fit.envelope.iter().map(|(s, d, c)| format!("s={s}:{d:.2e}({c})")).collect();
    Line {
        id: 8,
        name: "Markov property and induced distortion",
        pass: worst <= MARKOV_TOL && n > 0 && beta_ok && fit.decreasing,
        detail: format!(
            "{n} elements, max endpoint error {worst:.2e}; envelope {}, beta {:.3e}, D {:.3e}, {:.2?}",
            env.join(" "),
            fit.beta_hat,
            fit.d_tilde,
            t.elapsed()
        ),
    }
}

fn stopping_time() -> Line {
    let t = Instant::now();
    let cfg = partition_config();
    let rcfg = FullReturnConfig::for_range(&cfg, &family()).unwrap();
    let (mut trials, mut failed, mut compared) = (0, 0, 0);
    for k in 0..10u64 {
        let right = RETURN_CAP + rcfg.t_star;
        let omega = OmegaSequence::sample(100 + k, 0, right, family()).unwrap();
        let other = OmegaSequence::sample(500 + k, 0, right, family()).unwrap();
        let n = 10 + 5 * k as usize;
        let mut alt = omega.clone();
        for i in n..=right {
            alt = alt.with_value(i as i64, other.lambda(i as i64).unwrap()).unwrap();
        }
        let s = SampleConfig { n_samples: 5000, seed: k };
        let a = sample_return_partition(&omega, &cfg, &rcfg, RETURN_CAP, &s).unwrap();
        let b = sample_return_partition(&alt, &cfg, &rcfg, RETURN_CAP, &s).unwrap();
        let r = check_stopping_time(&a, &b, n);
        trials += 1;
        compared += r.compared;
        failed += usize::from(!r.pass());
    }
    Line {
        id: 9,
        name: "stopping time",
        pass: failed == 0 && compared > 0,
        detail: format!("{trials} agreement tests, {compared} elements compared, {failed} mismatching, {:.2?}", t.elapsed()),
    }
}

fn aperiodicity() -> Line {
    let cfg = partition_config();
    let rcfg = FullReturnConfig::for_range(&cfg, &FamilyRange::calibration()).unwrap();
    let w = OmegaSequence::calibration(0, RETURN_CAP + rcfg.t_star);
    let parts: Vec<ReturnPartition> = [1u64, 2]
        .iter()
        .map(|&seed| sample_return_partition(&w, &cfg, &rcfg, 60, &SampleConfig { n_samples: 5000, seed }).unwrap())
        .collect();
    let a = check_aperiodicity(&[&parts[0], &parts[1]]).unwrap();
    let eps_min = a.eps.iter().copied().fold(f64::INFINITY, f64::min);
    Line {
        id: 10,
        name: "aperiodicity",
        pass: a.gcd == 1 && eps_min > 0.0,
        detail: format!("return times {:?}, gcd {}, min eps {eps_min:.3e}", a.taus, a.gcd),
    }
}

fn equivariance() -> Line {
    let t = Instant::now();
    let w = OmegaSequence::sample(7, 60, 51, family()).unwrap();
    let worst_at = |bins: usize| {
        let run = estimate_measure_ulam(&w, bins, 50, 60).unwrap();
        let r = equivariance_residual(&w, &run).unwrap();
        (r.len(), r.into_iter().fold(0.0, f64::max))
    };
    let (n, coarse) = worst_at(1 << 12);
    let (_, fine) = worst_at(1 << 13);
    let bound = 2.0 / 4096.0 + 1e-8;
    let ratio = fine / coarse;
    Line {
        id: 11,
        name: "equivariance",
        pass: n == 50 && coarse <= bound && (0.35..=0.65).contains(&ratio),
        detail: format!(
            "{n} fibres, max residual {coarse:.3e} at B=4096 (bound {bound:.3e}), {fine:.3e} at B=8192 (ratio {ratio:.3}), {:.2?}",
            t.elapsed()
        ),
    }
}

fn correlation_decay() -> Line {
    let t = Instant::now();
    let x = Observable::Coordinate;
    let src = MeasureSource::Ulam { bins: 4096, burn_in: 60 };
    let n_max = 40;
    let mut ok = true;
    let (mut min_rate, mut min_r2) = (f64::INFINITY, f64::INFINITY);
    for k in 0..ENSEMBLE {
        let w = OmegaSequence::sample(1 + k, n_max + 60, n_max + 1, family()).unwrap();
        for mode in [Mode::Forward, Mode::Pullback] {
            let s = quenched_correlation(&w, &x, &x, n_max, &src, mode).unwrap();
            match s.fit {
                Some(f) => {
                    ok &= f.passes(0.85);
                    min_rate = min_rate.min(f.rate);
                    min_r2 = min_r2.min(f.r2);
                }
                None => ok = false,
            }
        }
    }
    let (fast, e) = within(t, 900);
    Line {
        id: 12,
        name: "correlation decay",
        pass: ok && fast,
        detail: format!("{ENSEMBLE} omega, forward and pullback: min rate {min_rate:.4}, min r2 {min_r2:.4}, {e:.2?}"),
    }
}

fn main() -> ExitCode {
    let mut lines = vec![calibration_correlations(), calibration_measure()];
    let (escape, l3) = escape_ensemble();
    lines.push(l3);
    let (returns, l4) = return_ensemble();
    lines.push(l4);
    lines.push(size_bound(&escape));
    lines.push(depth_bound(&escape));
    lines.push(distortion(&escape));
    lines.push(markov(&returns));
    lines.push(stopping_time());
    lines.push(aperiodicity());
    lines.push(equivariance());
    lines.push(correlation_decay());
    lines.sort_by_key(|l| l.id);
    let mut all = true;
    for l in &lines {
        all &= l.pass;
        println!("criterion {:>2} {}: {} ({})", l.id, if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    println!("acceptance: {}/{} criteria pass", lines.iter().filter(|l| l.pass).count(), lines.len());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
