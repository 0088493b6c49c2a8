//! Quenched correlations against the discretized equivariant densities.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fit::{fit_log_linear, TailFit};
use crate::measure::{bin_edge, estimate_measure_ulam, ulam_operator, FiberMeasure};
use crate::random_driver::OmegaSequence;

/// Test functions on `I`.
#[derive(Clone, Debug, PartialEq)]
pub enum Observable {
    Coordinate,
    Constant(f64),
    /// `|x|^p`.
    AbsPow(f64),
    /// `cos(2πkx)`.
    Cosine(u32),
    Offset(Box<Observable>, f64),
}

impl Observable {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Observable::Coordinate => x,
            Observable::Constant(c) => *c,
            Observable::AbsPow(p) => x.abs().powf(*p),
            Observable::Cosine(k) => (2.0 * std::f64::consts::PI * *k as f64 * x).cos(),
            Observable::Offset(f, c) => f.eval(x) + c,
        }
    }

    /// Mean over `[a, b]` from the antiderivative.
    pub fn bin_average(&self, a: f64, b: f64) -> f64 {
        match self {
            Observable::Coordinate => 0.5 * (a + b),
            Observable::Constant(c) => *c,
            Observable::AbsPow(p) => {
                let prim = |x: f64| x.signum() * x.abs().powf(p + 1.0) / (p + 1.0);
                (prim(b) - prim(a)) / (b - a)
            }
            Observable::Cosine(0) => 1.0,
            Observable::Cosine(k) => {
                let w = 2.0 * std::f64::consts::PI * *k as f64;
                ((w * b).sin() - (w * a).sin()) / (w * (b - a))
            }
            Observable::Offset(f, c) => f.bin_average(a, b) + c,
        }
    }

    pub fn bin_averages(&self, bins: usize) -> Vec<f64> {
        (0..bins).map(|i| self.bin_average(bin_edge(i, bins), bin_edge(i + 1, bins))).collect()
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::Coordinate => write!(f, "x"),
            Observable::Constant(c) => write!(f, "const:{c}"),
            Observable::AbsPow(p) => write!(f, "abspow:{p}"),
            Observable::Cosine(k) => write!(f, "cos:{k}"),
            Observable::Offset(g, c) => write!(f, "{g}+{c}"),
        }
    }
}

impl FromStr for Observable {
    type Err = Error;

    /// `x`, `const:c`, `abspow:p` or `cos:k`, optionally followed by `+c`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unknown observable '{s}'"));
        if let Some((head, off)) = s.rsplit_once('+') {
            if !head.ends_with(['e', 'E']) && !head.is_empty() {
                let c: f64 = off.trim().parse().map_err(|_| bad())?;
                return Ok(Observable::Offset(Box::new(head.parse()?), c));
            }
        }
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |a: &str| a.trim().parse::<f64>().map_err(|_| bad());
        match name {
            "x" if arg.is_empty() => Ok(Observable::Coordinate),
            "const" => Ok(Observable::Constant(num(arg)?)),
            "abspow" => Ok(Observable::AbsPow(num(arg)?)),
            "cos" => Ok(Observable::Cosine(arg.trim().parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Start at `μ_ω` and push forward to `σ^n ω`.
    Forward,
    /// Start at `μ_{σ^{-n}ω}` and push forward to `ω`.
    Pullback,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Forward => "forward",
            Mode::Pullback => "pullback",
        })
    }
}

/// Where the fibre densities come from.
#[derive(Clone, Debug)]
pub enum MeasureSource {
    /// Ulam densities on `bins` cells after `burn_in` pushes.
    Ulam { bins: usize, burn_in: usize },
    /// Precomputed densities on a common grid, looked up by fibre index.
    Given(Vec<FiberMeasure>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSeries {
    pub mode: Mode,
    pub phi: String,
    pub psi: String,
    /// `C_n` for `n = 0..=n_max`.
    pub values: Vec<f64>,
    pub noise_floor: f64,
    pub fit: Option<TailFit>,
    pub fit_error: Option<String>,
}

impl CorrelationSeries {
    pub fn write_csv<W: Write>(series: &[CorrelationSeries], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "phi", "psi", "n", "c_n"])?;
        for s in series {
            for (n, c) in s.values.iter().enumerate() {
                out.write_record([s.mode.to_string(), s.phi.clone(), s.psi.clone(), n.to_string(), format!("{c:?}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_fit_csv<W: Write>(series: &[CorrelationSeries], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "phi", "psi", "c", "b", "r2", "n_lo", "n_hi", "noise_floor"])?;
        for s in series {
            let f = s.fit.map_or([String::new(), String::new(), String::new(), String::new(), String::new()], |f| {
                [
                    format!("{:?}", f.c),
                    format!("{:?}", f.rate),
                    format!("{:?}", f.r2),
                    f.n_range.0.to_string(),
                    f.n_range.1.to_string(),
                ]
            });
            let mut rec = vec![s.mode.to_string(), s.phi.clone(), s.psi.clone()];
            rec.extend(f);
            rec.push(format!("{:?}", s.noise_floor));
            out.write_record(rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fewest points a correlation fit accepts.
pub const MIN_FIT_POINTS: usize = 3;

fn fiber(source: &[FiberMeasure], k: i64) -> Result<&FiberMeasure> {
    source.iter().find(|m| m.fiber == k).ok_or_else(|| {
        let lo = source.iter().map(|m| m.fiber).min().unwrap_or(0);
        let hi = source.iter().map(|m| m.fiber).max().unwrap_or(-1);
        Error::Window { index: k, lo, hi }
    })
}

fn integral(f: &[f64], g: &[f64]) -> f64 {
    f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / f.len() as f64
}

/// `C_n` for `n = 0..=n_max` with a log-linear fit from `n = 1` up to the
/// last value before the series first drops below the noise floor
/// `(2/B)·‖φ‖_∞‖ψ‖_∞`.
pub fn quenched_correlation(
    omega: &OmegaSequence,
    phi: &Observable,
    psi: &Observable,
    n_max: usize,
    source: &MeasureSource,
    mode: Mode,
) -> Result<CorrelationSeries> {
    let needed: (i64, usize) = match mode {
        Mode::Forward => (0, n_max),
        Mode::Pullback => (-(n_max as i64), n_max),
    };
    omega.ensure_forward(needed.0, needed.1)?;
    let owned;
    let fibers: &[FiberMeasure] = match source {
        MeasureSource::Given(v) => v,
        MeasureSource::Ulam { bins, burn_in } => {
            let run = estimate_measure_ulam(&omega.shifted(needed.0), *bins, needed.1, *burn_in)?;
            owned = run
                .fibers
                .into_iter()
                .map(|mut m| {
                    m.fiber += needed.0;
                    m
                })
                .collect::<Vec<_>>();
            &owned
        }
    };
    let bins = fiber(fibers, 0)?.bins();
    let fa = phi.bin_averages(bins);
    let pa = psi.bin_averages(bins);
    let push = |k: i64, g: &[f64]| -> Result<Vec<f64>> { Ok(ulam_operator(omega.params(k)?, bins, bins).push(g)) };
    let weighted = |h: &FiberMeasure| -> Result<Vec<f64>> {
        if h.bins() != bins {
            return Err(Error::Precondition("fibre densities on different grids".into()));
        }
        Ok(h.density.iter().zip(&pa).map(|(d, p)| d * p).collect())
    };
    let mut values = Vec::with_capacity(n_max + 1);
    match mode {
        Mode::Forward => {
            let h0 = fiber(fibers, 0)?;
            let e_psi = integral(&pa, &h0.density);
            let mut g = weighted(h0)?;
            for n in 0..=n_max {
                let hn = fiber(fibers, n as i64)?;
                values.push((integral(&fa, &g) - integral(&fa, &hn.density) * e_psi).abs());
                if n < n_max {
                    g = push(n as i64, &g)?;
                }
            }
        }
        Mode::Pullback => {
            let e_phi = integral(&fa, &fiber(fibers, 0)?.density);
            for n in 0..=n_max {
                let start = -(n as i64);
                let hs = fiber(fibers, start)?;
                let e_psi = integral(&pa, &hs.density);
                let mut g = weighted(hs)?;
                for k in start..0 {
                    g = push(k, &g)?;
                }
                values.push((integral(&fa, &g) - e_phi * e_psi).abs());
            }
        }
    }
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let noise_floor = 2.0 / bins as f64 * sup(&fa) * sup(&pa);
    let stop = (1..=n_max).find(|&n| values[n] < noise_floor).unwrap_or(n_max + 1);
    let pts: Vec<(f64, f64)> = (1..stop).map(|n| (n as f64, values[n])).collect();
    let (fit, fit_error) = match fit_log_linear(&pts, MIN_FIT_POINTS) {
        Ok((c, rate, r2)) => (Some(TailFit { c, rate, r2, n_range: (1, stop - 1) }), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(CorrelationSeries { mode, phi: phi.to_string(), psi: psi.to_string(), values, noise_floor, fit, fit_error })
}

/// `max |f(x) − f(y)| / |x − y|^η` over pairs of grid points.
pub fn holder_seminorm(f: &Observable, eta: f64, grid: &[f64]) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::Precondition("need at least two grid points".into()));
    }
    let vals: Vec<f64> = grid.iter().map(|&x| f.eval(x)).collect();
    let mut best: f64 = 0.0;
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            let d = (grid[i] - grid[j]).abs();
            if d > 0.0 {
                best = best.max((vals[i] - vals[j]).abs() / d.powf(eta));
            }
        }
    }
    Ok(best)
}

/// `0` and `±` log-spaced points from `1e-12` to `1/2`, `n` in total.
pub fn log_grid(n: usize) -> Vec<f64> {
    let half = n.saturating_sub(1) / 2;
    let mut g = vec![0.0];
    for i in 0..half {
        let t = if half > 1 { i as f64 / (half - 1) as f64 } else { 1.0 };
        let x = (1e-12f64.ln() + t * (0.5f64.ln() - 1e-12f64.ln())).exp();
        g.push(x);
        g.push(-x);
    }
    g.sort_by(f64::total_cmp);
    g
}
