//! Equivariant densities by Ulam discretization, with a Birkhoff histogram
//! as an independent estimate.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::map_family::{Branch, MapParams};
use crate::random_driver::{OmegaSequence, SINGULAR_EPS};

/// Density of a probability measure on a uniform grid of `I`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberMeasure {
    pub fiber: i64,
    pub density: Vec<f64>,
}

impl FiberMeasure {
    pub fn uniform(fiber: i64, bins: usize) -> Self {
        Self { fiber, density: vec![1.0; bins] }
    }

    pub fn bins(&self) -> usize {
        self.density.len()
    }

    pub fn width(&self) -> f64 {
        1.0 / self.bins() as f64
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.width()
    }

    /// L¹ distance on the common grid.
    pub fn l1_distance(&self, other: &FiberMeasure) -> Result<f64> {
        if self.bins() != other.bins() {
            return Err(Error::Precondition(format!("grids differ: {} vs {} bins", self.bins(), other.bins())));
        }
        Ok(self.density.iter().zip(&other.density).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.width())
    }

    /// Coarsens onto `bins` cells; `bins` must divide the current count.
    pub fn coarsen(&self, bins: usize) -> Result<FiberMeasure> {
        if bins == 0 || !self.bins().is_multiple_of(bins) {
            return Err(Error::Precondition(format!("{bins} does not divide {}", self.bins())));
        }
        let k = self.bins() / bins;
        let density = self.density.chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
        Ok(FiberMeasure { fiber: self.fiber, density })
    }

    pub fn write_csv<W: Write>(fibers: &[FiberMeasure], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fiber", "bin", "density"])?;
        for m in fibers {
            for (i, d) in m.density.iter().enumerate() {
                out.write_record([m.fiber.to_string(), i.to_string(), format!("{d:?}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Left edge of bin `i` of `n` on `I`.
#[inline]
pub fn bin_edge(i: usize, n: usize) -> f64 {
    -0.5 + i as f64 / n as f64
}

/// Sparse Ulam matrix of one map: `weights` lists `(src, dst, w)` with
/// `w = |src ∩ T^{-1} dst| / |src|`, so every source row sums to one.
#[derive(Clone, Debug)]
pub struct UlamOperator {
    pub src_bins: usize,
    pub dst_bins: usize,
    pub weights: Vec<(u32, u32, f64)>,
}

impl UlamOperator {
    pub fn new(p: &MapParams, src_bins: usize, dst_bins: usize) -> Self {
        let mut weights = Vec::with_capacity(2 * (src_bins + dst_bins));
        let h_src = 1.0 / src_bins as f64;
        for branch in [Branch::Left, Branch::Right] {
            let (dom_lo, dom_hi) = match branch {
                Branch::Left => (-0.5, 0.0),
                Branch::Right => (0.0, 0.5),
            };
            let (img_lo, img_hi) = p.branch_image(branch);
            let j_lo = (((img_lo + 0.5) * dst_bins as f64).floor() as usize).min(dst_bins - 1);
            let j_hi = (((img_hi + 0.5) * dst_bins as f64).ceil() as usize).clamp(1, dst_bins);
            // merge source edges with preimages of target edges, both increasing
            let mut cuts: Vec<(f64, usize)> = Vec::with_capacity(j_hi - j_lo + 1);
            for j in j_lo..=j_hi {
                let y = bin_edge(j, dst_bins).clamp(img_lo, img_hi);
                let x = p.inverse(branch, y).clamp(dom_lo, dom_hi);
                cuts.push((x, j));
            }
            cuts[0].0 = dom_lo;
            cuts.last_mut().unwrap().0 = dom_hi;
            let mut i = (((dom_lo + 0.5) * src_bins as f64).floor() as usize).min(src_bins - 1);
            let i_end = ((dom_hi + 0.5) * src_bins as f64).ceil() as usize;
            for k in 0..cuts.len() - 1 {
                let (a, j) = (cuts[k].0, cuts[k].1);
                let b = cuts[k + 1].0;
                if b <= a {
                    continue;
                }
                while i < i_end && bin_edge(i + 1, src_bins) <= a {
                    i += 1;
                }
                let mut s = i;
                while s < i_end && bin_edge(s, src_bins) < b {
                    let lo = a.max(bin_edge(s, src_bins));
                    let hi = b.min(bin_edge(s + 1, src_bins));
                    if hi > lo {
                        weights.push((s as u32, j as u32, (hi - lo) / h_src));
                    }
                    s += 1;
                }
            }
        }
        Self { src_bins, dst_bins, weights }
    }

    /// Pushes a (signed) density on the source grid to the target grid.
    pub fn push(&self, h: &[f64]) -> Vec<f64> {
        debug_assert_eq!(h.len(), self.src_bins);
        let mut out = vec![0.0; self.dst_bins];
        let scale = self.dst_bins as f64 / self.src_bins as f64;
        for &(i, j, w) in &self.weights {
            out[j as usize] += h[i as usize] * w * scale;
        }
        out
    }
}

type CacheKey = (u64, u64, usize, usize);

/// Operators are shared between fibres with the same map and grid.
pub fn ulam_operator(p: &MapParams, src_bins: usize, dst_bins: usize) -> Arc<UlamOperator> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<UlamOperator>>>> = OnceLock::new();
    let key = (p.lambda.to_bits(), p.a.to_bits(), src_bins, dst_bins);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(op) = cache.lock().unwrap().get(&key) {
        return op.clone();
    }
    let op = Arc::new(UlamOperator::new(p, src_bins, dst_bins));
    let mut c = cache.lock().unwrap();
    if c.len() > 4096 {
        c.clear();
    }
    c.insert(key, op.clone());
    op
}

/// Densities on fibres `0..=n_push` together with the convergence history
/// of the burn-in.
#[derive(Clone, Debug)]
pub struct UlamRun {
    pub fibers: Vec<FiberMeasure>,
    /// L¹ gap between the pushes of two different starting densities after
    /// each burn-in step.
    pub history: Vec<f64>,
    pub converged: bool,
    /// Set for a single bin, where every density is trivially 1.
    pub degenerate: bool,
}

/// Burn-in gaps below this count as converged.
pub const CONVERGENCE_TOL: f64 = 1e-8;

/// Starts from Lebesgue at fibre `-burn_in` and pushes along ω; the fibre
/// measures at `0..=n_push` are returned. A tilted start runs alongside to
/// record how fast the initial condition is forgotten.
pub fn estimate_measure_ulam(omega: &OmegaSequence, bins: usize, n_push: usize, burn_in: usize) -> Result<UlamRun> {
    if bins == 0 {
        return Err(Error::Precondition("at least one bin is needed".into()));
    }
    omega.ensure_forward(-(burn_in as i64), burn_in + n_push)?;
    if bins == 1 {
        let fibers = (0..=n_push as i64).map(|k| FiberMeasure::uniform(k, 1)).collect();
        return Ok(UlamRun { fibers, history: Vec::new(), converged: true, degenerate: true });
    }
    let mut h = vec![1.0; bins];
    let mut g: Vec<f64> = (0..bins).map(|i| 1.0 + 1.6 * (bin_edge(i, bins) + 0.5 / bins as f64)).collect();
    let mut history = Vec::with_capacity(burn_in);
    for k in -(burn_in as i64)..0 {
        let op = ulam_operator(omega.params(k)?, bins, bins);
        h = op.push(&h);
        g = op.push(&g);
        history.push(h.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / bins as f64);
    }
    let converged = history.last().is_none_or(|&d| d <= CONVERGENCE_TOL);
    let mut fibers = Vec::with_capacity(n_push + 1);
    fibers.push(FiberMeasure { fiber: 0, density: h.clone() });
    for k in 0..n_push as i64 {
        h = ulam_operator(omega.params(k)?, bins, bins).push(&h);
        fibers.push(FiberMeasure { fiber: k + 1, density: h.clone() });
    }
    Ok(UlamRun { fibers, history, converged, degenerate: false })
}

/// Refinement of the target grid used to resolve the exact pushforward.
pub const EQUIVARIANCE_REFINE: usize = 8;

/// `‖(T_{ω_n})_* μ_n − μ_{n+1}‖₁` with the pushforward of the piecewise
/// constant `μ_n` resolved on a grid [`EQUIVARIANCE_REFINE`] times finer.
pub fn equivariance_residual(omega: &OmegaSequence, run: &UlamRun) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(run.fibers.len().saturating_sub(1));
    for w in run.fibers.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let fine_bins = a.bins() * EQUIVARIANCE_REFINE;
        let pushed = ulam_operator(omega.params(a.fiber)?, a.bins(), fine_bins).push(&a.density);
        let d: f64 = pushed
            .iter()
            .enumerate()
            .map(|(i, v)| (v - b.density[i / EQUIVARIANCE_REFINE]).abs())
            .sum::<f64>()
            / fine_bins as f64;
        out.push(d);
    }
    Ok(out)
}

/// Histogram of stratified samples pushed from fibre `-burn_in` to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BirkhoffEstimate {
    pub measure: FiberMeasure,
    /// Orbits discarded for meeting the singular set.
    pub discarded: usize,
}

pub fn estimate_measure_birkhoff(
    omega: &OmegaSequence,
    bins: usize,
    n_samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<BirkhoffEstimate> {
    if n_samples == 0 || bins == 0 {
        return Err(Error::Precondition("need at least one sample and one bin".into()));
    }
    omega.ensure_forward(-(burn_in as i64), burn_in)?;
    let maps: Vec<&MapParams> = (-(burn_in as i64)..0).map(|k| omega.params(k)).collect::<Result<_>>()?;
    let full = crate::interval_partition::Interval::raw(-0.5, 0.5);
    let mut counts = vec![0u64; bins];
    let mut discarded = 0;
    'samples: for x in crate::pieces::stratified_points(&full, n_samples, seed) {
        let mut y = x;
        for p in &maps {
            if y.abs() < SINGULAR_EPS {
                discarded += 1;
                continue 'samples;
            }
            y = p.apply(y);
        }
        let i = (((y + 0.5) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let kept = (n_samples - discarded) as f64;
    if kept == 0.0 {
        return Err(Error::Precondition("every sample orbit met the singular set".into()));
    }
    let density = counts.iter().map(|&c| c as f64 * bins as f64 / kept).collect();
    Ok(BirkhoffEstimate { measure: FiberMeasure { fiber: 0, density }, discarded })
}
