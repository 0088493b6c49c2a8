//! The chopping machinery shared by the escape and return constructions.
//!
//! A piece is a subinterval of the starting interval together with its
//! image at the current time and the branch sides visited so far. Images
//! are carried forward endpoint by endpoint; whenever a piece is cut, the
//! cut point is pulled back to starting coordinates along the recorded
//! sides and shared by both siblings, so siblings tile their parent exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::interval_partition::{Classification, Interval, PartitionConfig};
use crate::map_family::{Branch, MapParams};
use crate::random_driver::OmegaSequence;

/// Branch sides visited at times `0..len`, one bit per step (set = left).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SidePath {
    bits: Vec<u64>,
    len: usize,
}

impl SidePath {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, branch: Branch) {
        if self.len.is_multiple_of(64) {
            self.bits.push(0);
        }
        if branch == Branch::Left {
            self.bits[self.len / 64] |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn get(&self, j: usize) -> Branch {
        assert!(j < self.len, "side index {j} beyond path length {}", self.len);
        if self.bits[j / 64] >> (j % 64) & 1 == 1 {
            Branch::Left
        } else {
            Branch::Right
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + '_ {
        (0..self.len).map(|j| self.get(j))
    }

    /// Compact text form, `L`/`R` per step.
    pub fn to_letters(&self) -> String {
        self.iter().map(|b| if b == Branch::Left { 'L' } else { 'R' }).collect()
    }

    /// Pulls `y`, a point at time `from + len`, back to time `from` through
    /// the branches recorded in this path starting at `from`.
    pub fn pull_back(&self, omega: &OmegaSequence, from: usize, y: f64) -> Result<f64> {
        let mut x = y;
        for j in (from..self.len).rev() {
            x = omega.params(j as i64)?.inverse(self.get(j), x);
        }
        Ok(x)
    }

    /// Pulls `y` back to time 0 and returns `log |DT^len|` at the pulled
    /// point. Inverse branches contract, so this stays accurate when the
    /// starting interval is far below f64 resolution.
    pub fn log_expansion_back(&self, omega: &OmegaSequence, y: f64) -> Result<f64> {
        let mut x = y;
        let mut acc = 0.0;
        for j in (0..self.len).rev() {
            let p = omega.params(j as i64)?;
            x = p.inverse(self.get(j), x);
            acc += p.log_slope(x);
        }
        Ok(acc)
    }
}

/// `T` restricted to one branch; at `x = 0` gives that branch's limit.
#[inline]
pub fn apply_branch(p: &MapParams, branch: Branch, x: f64) -> f64 {
    let v = p.a * x.abs().powf(p.lambda) - 0.5;
    match branch {
        Branch::Right => v,
        Branch::Left => -v,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Inessential,
    Essential,
    Escape,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    /// Absolute time.
    pub time: usize,
    pub kind: EventKind,
    /// Return depth; 0 for escapes.
    pub depth: u64,
    pub image: Interval,
}

#[derive(Clone, Debug)]
pub struct Piece {
    pub id: u64,
    /// In starting (time 0) coordinates.
    pub orig: Interval,
    /// Image at `time`.
    pub image: Interval,
    pub time: usize,
    /// Time the current escape round started.
    pub start: usize,
    pub path: SidePath,
    pub events: Vec<Event>,
    pub ancestors: Vec<u64>,
}

impl Piece {
    pub fn measure(&self) -> f64 {
        self.orig.hi - self.orig.lo
    }

    pub fn total_depth(&self) -> u64 {
        self.events.iter().map(|e| e.depth).sum()
    }
}

/// Parameters of one chopping run.
#[derive(Clone, Copy, Debug)]
pub struct RunParams {
    /// Absolute time cap; pieces still alive at this time become residual.
    pub cap: usize,
    /// Pieces lighter than this (in starting coordinates) become residual.
    pub min_piece: f64,
}

pub struct Runner<'a> {
    pub omega: &'a OmegaSequence,
    pub cfg: &'a PartitionConfig,
    pub params: RunParams,
    pub stack: Vec<Piece>,
    pub residual: f64,
    pub stats: RunStats,
    /// When set, only the piece containing this starting point is followed.
    pub focus: Option<f64>,
    /// In focus mode, the starting interval of the followed piece if it
    /// reached the cap.
    pub capped: Option<Interval>,
    next_id: u64,
}

/// Work counters of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub steps: u64,
    pub chops: u64,
    pub children: u64,
    pub zero_splits: u64,
    pub pullbacks: u64,
}

impl<'a> Runner<'a> {
    pub fn new(omega: &'a OmegaSequence, cfg: &'a PartitionConfig, params: RunParams) -> Self {
        Self { omega, cfg, params, stack: Vec::new(), residual: 0.0, stats: RunStats::default(), focus: None, capped: None, next_id: 0 }
    }

    pub fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }

    /// Starts a root piece at time 0 with identical starting and image
    /// coordinates.
    pub fn seed(&mut self, j: Interval) {
        let id = self.fresh_id();
        self.stack.push(Piece {
            id,
            orig: j,
            image: j,
            time: 0,
            start: 0,
            path: SidePath::new(),
            events: Vec::new(),
            ancestors: Vec::new(),
        });
    }

    /// Pulls a point of the current image of `p` back to starting coordinates.
    pub fn pull(&mut self, p: &Piece, y: f64) -> Result<f64> {
        self.stats.pullbacks += 1;
        p.path.pull_back(self.omega, 0, y)
    }

    /// Splits `p` at image cut points (strictly increasing, interior) into
    /// consecutive children. `orig_cuts` are the matching starting
    /// coordinates.
    pub fn split(&mut self, p: &Piece, cuts: &[f64], orig_cuts: &[f64]) -> Vec<Piece> {
        let mut img_pts = Vec::with_capacity(cuts.len() + 2);
        img_pts.push(p.image.lo);
        img_pts.extend_from_slice(cuts);
        img_pts.push(p.image.hi);
        let mut orig_pts = Vec::with_capacity(cuts.len() + 2);
        orig_pts.push(p.orig.lo);
        orig_pts.extend_from_slice(orig_cuts);
        orig_pts.push(p.orig.hi);
        let mut ancestors = p.ancestors.clone();
        ancestors.push(p.id);
        (0..img_pts.len() - 1)
            .map(|i| Piece {
                id: self.fresh_id(),
                orig: Interval::raw(orig_pts[i], orig_pts[i + 1]),
                image: Interval::raw(img_pts[i], img_pts[i + 1]),
                time: p.time,
                start: p.start,
                path: p.path.clone(),
                events: p.events.clone(),
                ancestors: ancestors.clone(),
            })
            .collect()
    }

    /// Pushes children so that the leftmost is processed first; light
    /// children go to the residual.
    pub fn push_children(&mut self, children: Vec<Piece>) {
        let last = children.len().saturating_sub(1);
        for (i, c) in children.into_iter().enumerate().rev() {
            if let Some(x) = self.focus {
                if in_block(c.orig.lo, c.orig.hi, i == last, x) {
                    self.stack.push(c);
                }
                continue;
            }
            if c.measure() < self.params.min_piece {
                self.residual += c.measure().max(0.0);
            } else {
                self.stack.push(c);
            }
        }
    }

    /// Runs pieces until the stack is empty. `on_escape` receives each
    /// piece at its escape time and may push further pieces.
    pub fn run<F>(&mut self, mut on_escape: F) -> Result<()>
    where
        F: FnMut(&mut Runner<'a>, Piece) -> Result<()>,
    {
        while let Some(p) = self.stack.pop() {
            if let Some(esc) = self.advance(p)? {
                on_escape(self, esc)?;
            }
        }
        Ok(())
    }

    /// Iterates one piece until it escapes (returned), is split (children
    /// pushed) or hits the cap (residual).
    fn advance(&mut self, mut p: Piece) -> Result<Option<Piece>> {
        let delta = self.cfg.delta();
        loop {
            if p.time >= self.params.cap {
                if self.focus.is_some() {
                    self.capped = Some(p.orig);
                }
                self.residual += p.measure();
                return Ok(None);
            }
            let img = p.image;
            if !self.cfg.meets_delta0(&img) {
                if p.time > p.start && img.len() >= delta {
                    p.events.push(Event { time: p.time, kind: EventKind::Escape, depth: 0, image: img });
                    return Ok(Some(p));
                }
            } else if img.straddles_zero() {
                self.stats.zero_splits += 1;
                let x0 = self.pull(&p, 0.0)?;
                let children = self.split(&p, &[0.0], &[x0]);
                self.push_children(children);
                return Ok(None);
            } else {
                match self.cfg.classify(&img) {
                    Classification::Inessential => {
                        let depth = self.cfg.depth(&img).unwrap_or(0);
                        p.events.push(Event { time: p.time, kind: EventKind::Inessential, depth, image: img });
                    }
                    _ => {
                        self.chop(p)?;
                        return Ok(None);
                    }
                }
            }
            self.step(&mut p)?;
        }
    }

    /// Moves `p` one step forward in time.
    pub fn step(&mut self, p: &mut Piece) -> Result<()> {
        self.stats.steps += 1;
        let params = self.omega.params(p.time as i64)?;
        let side = if p.image.mid() < 0.0 { Branch::Left } else { Branch::Right };
        p.image = Interval::raw(apply_branch(params, side, p.image.lo), apply_branch(params, side, p.image.hi));
        p.path.push(side);
        p.time += 1;
        Ok(())
    }

    /// Chops an essential return. The part outside Δ0 is split off and
    /// re-examined (empty result); otherwise the piece is cut at cell
    /// boundaries, partial end cells merged into their neighbours, and the
    /// children are returned with their return event recorded.
    pub fn chop_pieces(&mut self, p: Piece) -> Result<Vec<Piece>> {
        let delta = self.cfg.delta();
        let img = p.image;
        let positive = img.mid() > 0.0;
        // split off the free part first
        if positive && img.hi > delta {
            let x = self.pull(&p, delta)?;
            let children = self.split(&p, &[delta], &[x]);
            self.push_children(children);
            return Ok(Vec::new());
        }
        if !positive && img.lo < -delta {
            let x = self.pull(&p, -delta)?;
            let children = self.split(&p, &[-delta], &[x]);
            self.push_children(children);
            return Ok(Vec::new());
        }
        // |x| coordinates: inner u, outer v
        let (u, v) = if positive { (img.lo, img.hi) } else { (-img.hi, -img.lo) };
        let to_img = |s: f64| if positive { s } else { -s };
        let orig_at = |s: f64, this: &mut Self| this.pull(&p, to_img(s));
        let mut cuts_abs = Vec::new();

        // inner truncation near the singularity
        let orig_u = if positive { p.orig.lo } else { p.orig.hi };
        let mut inner = u;
        let mut r = self.cfg.r0 as u64 + 1;
        while r < 740 {
            let q = (-(r as f64)).exp();
            if q <= u || q >= v {
                if q <= u {
                    break;
                }
                r += 1;
                continue;
            }
            let oq = orig_at(q, self)?;
            let outside = match self.focus {
                Some(x) if positive => x >= oq,
                Some(x) => x < oq,
                None => false,
            };
            if outside || (oq - orig_u).abs() < self.params.min_piece {
                inner = q;
                break;
            }
            r += 1;
        }
        if self.focus.is_some() && inner == u && u < (-(self.cfg.r0 as f64) - 700.0).exp() {
            // the followed point sits on the singularity
            self.residual += p.measure();
            return Ok(Vec::new());
        }

        if inner > u {
            cuts_abs.push(inner);
        }
        self.cell_cuts(inner, v, &mut cuts_abs);

        // all points in increasing image order
        let mut pts = Vec::with_capacity(cuts_abs.len() + 2);
        pts.push(img.lo);
        if positive {
            pts.extend(cuts_abs.iter().copied());
        } else {
            pts.extend(cuts_abs.iter().rev().map(|&s| -s));
        }
        pts.push(img.hi);
        let mut orig = vec![f64::NAN; pts.len()];
        orig[0] = p.orig.lo;
        orig[pts.len() - 1] = p.orig.hi;
        // bisect over point ranges; a block lighter than min_piece holds
        // only children that would be pruned anyway
        let mut keep = Vec::new();
        let last = pts.len() - 1;
        let mut todo = vec![(0usize, last)];
        while let Some((i, j)) = todo.pop() {
            let m = orig[j] - orig[i];
            if let Some(x) = self.focus {
                if !in_block(orig[i], orig[j], j == last, x) {
                    continue;
                }
            } else if m < self.params.min_piece {
                self.residual += m.max(0.0);
                continue;
            }
            if j == i + 1 {
                keep.push(i);
                continue;
            }
            let mid = (i + j) / 2;
            orig[mid] = self.pull(&p, pts[mid])?;
            todo.push((mid, j));
            todo.push((i, mid));
        }
        let mut ancestors = p.ancestors.clone();
        ancestors.push(p.id);
        let mut children = Vec::with_capacity(keep.len());
        for i in keep {
            let image = Interval::raw(pts[i], pts[i + 1]);
            let depth = self.cfg.depth(&image).unwrap_or(0);
            let mut events = p.events.clone();
            events.push(Event { time: p.time, kind: EventKind::Essential, depth, image });
            children.push(Piece {
                id: self.fresh_id(),
                orig: Interval::raw(orig[i], orig[i + 1]),
                image,
                time: p.time,
                start: p.start,
                path: p.path.clone(),
                events,
                ancestors: ancestors.clone(),
            });
        }
        Ok(children)
    }

    fn chop(&mut self, p: Piece) -> Result<()> {
        let children = self.chop_pieces(p)?;
        self.stats.chops += 1;
        self.stats.children += children.len() as u64;
        let mut kept = Vec::with_capacity(children.len());
        for mut c in children {
            if c.measure() < self.params.min_piece {
                self.residual += c.measure().max(0.0);
                continue;
            }
            self.step(&mut c)?;
            kept.push(c);
        }
        for c in kept.into_iter().rev() {
            self.stack.push(c);
        }
        Ok(())
    }

    /// Interior cell boundaries of `[u, v)` (|x| coordinates, inside Δ0),
    /// dropping the first and last when the end cells are only partly
    /// covered. Appends in increasing order.
    fn cell_cuts(&self, u: f64, v: f64, out: &mut Vec<f64>) {
        let cfg = self.cfg;
        let mut pts = Vec::new();
        let Ok(start) = cfg.cell_of(u.max(f64::MIN_POSITIVE)) else { return };
        let mut r = start.r.unsigned_abs();
        let mut j = start.m; // next boundary index within level r
        loop {
            let n = cfg.cells_per_level(r);
            let b = cfg.boundary(r, j);
            if b >= v {
                break;
            }
            if b > u {
                pts.push(b);
            }
            if j >= n {
                if r <= cfg.r0 as u64 {
                    break;
                }
                r -= 1;
                j = 1;
            } else {
                j += 1;
            }
        }
        if pts.is_empty() {
            return;
        }
        let first_partial = !is_boundary(cfg, u);
        let last_partial = !is_boundary(cfg, v);
        let lo = usize::from(first_partial);
        let hi = pts.len() - usize::from(last_partial);
        if lo < hi {
            out.extend_from_slice(&pts[lo..hi]);
        }
    }
}

/// Children own their left endpoint; the last one also owns its right.
fn in_block(lo: f64, hi: f64, closed: bool, x: f64) -> bool {
    lo <= x && (x < hi || (closed && x <= hi))
}

fn is_boundary(cfg: &PartitionConfig, s: f64) -> bool {
    if s >= cfg.delta() {
        return true;
    }
    let Ok(id) = cfg.cell_of(s) else { return false };
    let r = id.r.unsigned_abs();
    cfg.boundary(r, id.m - 1) == s
}

/// One point per equal-width stratum of `j`, uniformly placed in its stratum.
pub fn stratified_points(j: &Interval, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = j.len() / n as f64;
    (0..n).map(|i| (j.lo + (i as f64 + rng.gen::<f64>()) * w).min(j.hi)).collect()
}
