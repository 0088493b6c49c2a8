//! Log-linear least squares for exponential tails `c e^{-rate n}`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailFit {
    pub c: f64,
    pub rate: f64,
    pub r2: f64,
    pub n_range: (usize, usize),
}

impl TailFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.c * (-self.rate * n).exp()
    }

    /// Positive rate with a fit at least as good as `min_r2`.
    pub fn passes(&self, min_r2: f64) -> bool {
        self.rate > 0.0 && self.r2 >= min_r2
    }
}

/// Fits `log y = log c - rate x` over the points with `y > 0`.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    fit_log_linear(points, 5)
}

/// As [`fit_exponential`] with a custom minimum number of usable points.
pub fn fit_log_linear(points: &[(f64, f64)], min_points: usize) -> Result<(f64, f64, f64)> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *y > 0.0 && y.is_finite() && x.is_finite())
        .map(|&(x, y)| (x, y.ln()))
        .collect();
    if used.len() < min_points.max(2) {
        return Err(Error::Fit(format!("{} usable points, need at least {}", used.len(), min_points.max(2))));
    }
    let n = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / n;
    let my = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all abscissae coincide".into()));
    }
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let syy: f64 = used.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sse: f64 = used.iter().map(|p| (p.1 - icept - slope * p.0).powi(2)).sum();
    let r2 = if syy <= 1e-24 * n || sse <= 1e-24 * n {
        1.0
    } else {
        1.0 - sse / syy
    };
    Ok((icept.exp(), -slope, r2))
}

/// Fits a tail sampled at every integer in `n_range` (inclusive).
pub fn fit_tail(tail: impl Fn(usize) -> f64, n_range: (usize, usize)) -> Result<TailFit> {
    let points: Vec<(f64, f64)> = (n_range.0..=n_range.1).map(|n| (n as f64, tail(n))).collect();
    let (c, rate, r2) = fit_exponential(&points)?;
    Ok(TailFit { c, rate, r2, n_range })
}
