//! Space-time domains, their rasterization onto a node grid, slice plans
//! and slab Hausdorff diagnostics.
//!
//! A [`TimeDomain`] describes `t -> Omega(t)` either as moving intervals
//! (1D, piecewise smooth with jumps) or as the sublevel set `{phi < 0}` of an
//! expression. Sections are right-continuous: at a jump time the new shape is
//! returned, and [`side_limits`] exposes both one-sided shapes.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{Expr, ExprError, Vars};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("time {t} is outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("degenerate section{}: minimum feature size {min_feature:.3e} is below two grid spacings ({spacing:.3e} each)", at_time(*.t))]
    DegenerateSection {
        t: Option<f64>,
        min_feature: f64,
        spacing: f64,
    },
    #[error("Hausdorff distance is undefined for an empty point set")]
    UndefinedDistance,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid domain: {}", .0.join("; "))]
    InvalidDomain(Vec<String>),
    #[error("slice plan needs at least one slice")]
    NoSlices,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

fn at_time(t: Option<f64>) -> String {
    t.map(|t| format!(" at t = {t}")).unwrap_or_default()
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Uniform node grid over the box `Q0`. Each axis has `counts + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    origin: [f64; 2],
    spacing: [f64; 2],
    counts: [usize; 2],
}

impl Grid {
    pub fn new(origin: &[f64], spacing: &[f64], counts: &[usize]) -> Result<Self> {
        let dim = origin.len();
        if !(1..=2).contains(&dim) || spacing.len() != dim || counts.len() != dim {
            return Err(GeometryError::InvalidGrid(
                "dimension must be 1 or 2 with one spacing and count per axis".into(),
            ));
        }
        let mut g = Grid {
            dim,
            origin: [0.0; 2],
            spacing: [1.0; 2],
            counts: [0; 2],
        };
        for a in 0..dim {
            if !(spacing[a] > 0.0 && spacing[a].is_finite()) {
                return Err(GeometryError::InvalidGrid(format!(
                    "spacing on axis {a} must be positive, got {}",
                    spacing[a]
                )));
            }
            if counts[a] < 3 {
                return Err(GeometryError::InvalidGrid(format!(
                    "axis {a} needs at least 3 cells, got {}",
                    counts[a]
                )));
            }
            if !origin[a].is_finite() {
                return Err(GeometryError::InvalidGrid("origin must be finite".into()));
            }
            g.origin[a] = origin[a];
            g.spacing[a] = spacing[a];
            g.counts[a] = counts[a];
        }
        Ok(g)
    }

    /// 1D grid on `[lo, hi]` with spacing `(hi - lo) / cells`.
    pub fn uniform_1d(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        Grid::new(&[lo], &[(hi - lo) / cells as f64], &[cells])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing[..self.dim].iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn cells(&self, axis: usize) -> usize {
        self.counts[axis]
    }

    pub fn nodes_per_axis(&self, axis: usize) -> usize {
        if axis < self.dim {
            self.counts[axis] + 1
        } else {
            1
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis(0) * self.nodes_per_axis(1)
    }

    /// Volume (length in 1D) attached to each node by the quadrature rule.
    pub fn cell_volume(&self) -> f64 {
        self.spacing[..self.dim].iter().product()
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.origin[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.origin[axis] + self.counts[axis] as f64 * self.spacing[axis]
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nodes_per_axis(0) * j
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        let nx = self.nodes_per_axis(0);
        [idx % nx, idx / nx]
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let [i, j] = self.multi_index(idx);
        [
            self.origin[0] + i as f64 * self.spacing[0],
            if self.dim > 1 {
                self.origin[1] + j as f64 * self.spacing[1]
            } else {
                0.0
            },
        ]
    }

    /// Coordinates as a slice of length `dim`.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.coords(idx)[..self.dim].to_vec()
    }

    /// Node one step along `axis` in direction `dir` (+1 / -1), if inside the grid.
    pub fn step(&self, idx: usize, axis: usize, dir: i64) -> Option<usize> {
        let mut m = self.multi_index(idx);
        let n = self.nodes_per_axis(axis) as i64;
        let k = m[axis] as i64 + dir;
        if k < 0 || k >= n {
            return None;
        }
        m[axis] = k as usize;
        Some(self.index(m[0], m[1]))
    }

    /// Edge neighbours of a node that lie on the grid, plus the number of
    /// neighbours that fall off the grid.
    pub fn neighbors(&self, idx: usize) -> (Vec<usize>, usize) {
        let mut out = Vec::with_capacity(2 * self.dim);
        let mut missing = 0;
        for axis in 0..self.dim {
            for dir in [-1, 1] {
                match self.step(idx, axis, dir) {
                    Some(n) => out.push(n),
                    None => missing += 1,
                }
            }
        }
        (out, missing)
    }
}

/// One connected component of a moving-interval domain: a sequence of smooth
/// pieces, each valid from its start time until the next piece starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pieces: Vec<TrackPiece>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackPiece {
    pub start: f64,
    pub left: Expr,
    pub right: Expr,
}

impl Track {
    pub fn smooth(left: Expr, right: Expr) -> Self {
        Track {
            pieces: vec![TrackPiece {
                start: 0.0,
                left,
                right,
            }],
        }
    }

    /// Adds a jump at time `at` after which the endpoints follow new expressions.
    pub fn with_jump(mut self, at: f64, left: Expr, right: Expr) -> Self {
        self.pieces.push(TrackPiece {
            start: at,
            left,
            right,
        });
        self.pieces.sort_by(|a, b| a.start.total_cmp(&b.start));
        self
    }

    pub fn pieces(&self) -> &[TrackPiece] {
        &self.pieces
    }

    fn jump_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.pieces.iter().skip(1).map(|p| p.start)
    }

    fn piece_at(&self, t: f64, from_left: bool) -> &TrackPiece {
        let mut chosen = &self.pieces[0];
        for p in &self.pieces[1..] {
            let active = if from_left { p.start < t } else { p.start <= t };
            if active {
                chosen = p;
            }
        }
        chosen
    }

    fn interval(&self, t: f64, from_left: bool) -> Result<(f64, f64)> {
        let p = self.piece_at(t, from_left);
        let v = Vars {
            t,
            ..Default::default()
        };
        Ok((p.left.eval(&v)?, p.right.eval(&v)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainShape {
    MovingIntervals(Vec<Track>),
    /// `Omega(t) = {x : phi(t, x) < 0}`; `bounds` is the box searched when a
    /// 1D section is converted to intervals.
    Implicit {
        phi: Arc<Expr>,
        dim: usize,
        bounds: [(f64, f64); 2],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeDomain {
    shape: DomainShape,
    horizon: f64,
}

/// A spatial section of the domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Disjoint open intervals, sorted by left endpoint.
    Intervals(Vec<(f64, f64)>),
    /// Sublevel set `{x : phi(t, x) < 0}` at a fixed time.
    Implicit { phi: Arc<Expr>, t: f64, dim: usize },
}

impl Region {
    pub fn intervals(list: Vec<(f64, f64)>) -> Self {
        Region::Intervals(normalize(list))
    }

    pub fn empty() -> Self {
        Region::Intervals(Vec::new())
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Intervals(_) => 1,
            Region::Implicit { dim, .. } => *dim,
        }
    }

    pub fn as_intervals(&self) -> Option<&[(f64, f64)]> {
        match self {
            Region::Intervals(v) => Some(v),
            Region::Implicit { .. } => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Region::Intervals(v) if v.is_empty())
    }

    /// Signed level value: negative inside, zero on the boundary. For
    /// intervals this is minus the distance to the nearest endpoint.
    pub fn level(&self, x: &[f64]) -> Result<f64> {
        match self {
            Region::Intervals(list) => {
                let x = x[0];
                let mut best = f64::INFINITY;
                for &(a, b) in list {
                    let v = (a - x).max(x - b);
                    best = best.min(v);
                }
                Ok(best)
            }
            Region::Implicit { phi, t, .. } => Ok(phi.eval(&Vars::at(*t, x))?),
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        Ok(self.level(x)? < -tol)
    }

    pub fn contains_closed(&self, x: &[f64], tol: f64) -> Result<bool> {
        Ok(self.level(x)? <= tol)
    }
}

fn normalize(mut list: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    list.retain(|&(a, b)| b > a);
    list.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(list.len());
    for (a, b) in list {
        match out.last_mut() {
            Some(last) if a < last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// `a \ b` for finite unions of intervals (up to endpoints).
pub fn interval_difference(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(lo, hi) in a {
        let mut pieces = vec![(lo, hi)];
        for &(blo, bhi) in b {
            let mut next = Vec::new();
            for (plo, phi) in pieces {
                if bhi <= plo || blo >= phi {
                    next.push((plo, phi));
                    continue;
                }
                if blo > plo {
                    next.push((plo, blo));
                }
                if bhi < phi {
                    next.push((bhi, phi));
                }
            }
            pieces = next;
        }
        out.extend(pieces);
    }
    normalize(out)
}

impl TimeDomain {
    pub fn moving_intervals(tracks: Vec<Track>, horizon: f64) -> Self {
        TimeDomain {
            shape: DomainShape::MovingIntervals(tracks),
            horizon,
        }
    }

    pub fn implicit(phi: Expr, dim: usize, bounds: &[(f64, f64)], horizon: f64) -> Self {
        let mut b = [(0.0, 0.0); 2];
        for (slot, v) in b.iter_mut().zip(bounds) {
            *slot = *v;
        }
        TimeDomain {
            shape: DomainShape::Implicit {
                phi: Arc::new(phi),
                dim,
                bounds: b,
            },
            horizon,
        }
    }

    pub fn shape(&self) -> &DomainShape {
        &self.shape
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            DomainShape::MovingIntervals(_) => 1,
            DomainShape::Implicit { dim, .. } => *dim,
        }
    }

    /// Sorted, deduplicated jump times strictly inside `(0, T)`.
    pub fn jump_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = match &self.shape {
            DomainShape::MovingIntervals(tracks) => tracks
                .iter()
                .flat_map(Track::jump_times)
                .filter(|&t| t > 0.0 && t < self.horizon)
                .collect(),
            DomainShape::Implicit { .. } => Vec::new(),
        };
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    pub fn is_jump_time(&self, t: f64) -> bool {
        self.jump_times().contains(&t)
    }

    fn check_range(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(GeometryError::OutOfRange {
                t,
                horizon: self.horizon,
            })
        }
    }

    fn region_at(&self, t: f64, from_left: bool) -> Result<Region> {
        match &self.shape {
            DomainShape::MovingIntervals(tracks) => {
                let mut list = Vec::with_capacity(tracks.len());
                for tr in tracks {
                    list.push(tr.interval(t, from_left)?);
                }
                Ok(Region::intervals(list))
            }
            DomainShape::Implicit { phi, dim, bounds } => {
                if *dim == 1 {
                    Ok(Region::intervals(implicit_intervals(phi, t, bounds[0])?))
                } else {
                    Ok(Region::Implicit {
                        phi: phi.clone(),
                        t,
                        dim: *dim,
                    })
                }
            }
        }
    }

    /// Smallest box (per spatial axis) containing every section, estimated by
    /// sampling times.
    pub fn spatial_bounds(&self) -> Result<Vec<(f64, f64)>> {
        match &self.shape {
            DomainShape::Implicit { dim, bounds, .. } => Ok(bounds[..*dim].to_vec()),
            DomainShape::MovingIntervals(_) => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for t in self.sample_times(512) {
                    let (a, b) = side_limits(self, t)?;
                    for r in [a, b] {
                        if let Some(list) = r.as_intervals() {
                            for &(l, h) in list {
                                lo = lo.min(l);
                                hi = hi.max(h);
                            }
                        }
                    }
                }
                Ok(vec![(lo, hi)])
            }
        }
    }

    /// Uniform sample of `[0, T]` plus every jump time.
    pub fn sample_times(&self, n: usize) -> Vec<f64> {
        let mut ts: Vec<f64> = (0..=n)
            .map(|i| self.horizon * i as f64 / n as f64)
            .collect();
        ts.extend(self.jump_times());
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// Checks the domain invariants against a grid and returns every violation.
    pub fn validate(&self, grid: &Grid) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            problems.push(format!("horizon T must be positive, got {}", self.horizon));
            return problems;
        }
        if self.dim() != grid.dim() {
            problems.push(format!(
                "domain dimension {} does not match grid dimension {}",
                self.dim(),
                grid.dim()
            ));
            return problems;
        }
        let margin = 2.0 * grid.min_spacing();
        let times = self.sample_times(256);
        match &self.shape {
            DomainShape::MovingIntervals(tracks) => {
                if tracks.is_empty() {
                    problems.push("moving-interval domain has no tracks".into());
                    return problems;
                }
                let jumps = self.jump_times();
                'times: for &t in &times {
                    for from_left in [false, true] {
                        if from_left && !jumps.contains(&t) {
                            continue;
                        }
                        let mut ivs = Vec::new();
                        for (k, tr) in tracks.iter().enumerate() {
                            match tr.interval(t, from_left) {
                                Ok((a, b)) => {
                                    if !(a.is_finite() && b.is_finite()) || a >= b {
                                        problems.push(format!(
                                            "track {k}: left {a} must be below right {b} at t = {t}"
                                        ));
                                        break 'times;
                                    }
                                    if a < grid.lower(0) + margin || b > grid.upper(0) - margin {
                                        problems.push(format!(
                                            "track {k} at t = {t} ({a}, {b}) leaves the grid box minus a margin of {margin}"
                                        ));
                                        break 'times;
                                    }
                                    ivs.push((a, b));
                                }
                                Err(e) => {
                                    problems.push(format!("track {k} at t = {t}: {e}"));
                                    break 'times;
                                }
                            }
                        }
                        ivs.sort_by(|a, b| a.0.total_cmp(&b.0));
                        if ivs.windows(2).any(|w| w[0].1 > w[1].0) {
                            problems.push(format!("tracks overlap at t = {t}"));
                            break 'times;
                        }
                    }
                }
            }
            DomainShape::Implicit { phi, .. } => {
                let tol = 1e-9 * grid.min_spacing();
                'outer: for &t in times.iter().step_by(8) {
                    for idx in 0..grid.node_count() {
                        let c = grid.coords(idx);
                        let near_edge = (0..grid.dim()).any(|a| {
                            c[a] < grid.lower(a) + margin - tol || c[a] > grid.upper(a) - margin + tol
                        });
                        if !near_edge {
                            continue;
                        }
                        match phi.eval(&Vars::at(t, &c)) {
                            Ok(v) if v > 0.0 => {}
                            Ok(_) => {
                                problems.push(format!(
                                    "section at t = {t} reaches within {margin} of the grid boundary near {:?}",
                                    &c[..grid.dim()]
                                ));
                                break 'outer;
                            }
                            Err(e) => {
                                problems.push(format!("phi at t = {t}: {e}"));
                                break 'outer;
                            }
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            match section(self, 0.0).and_then(|r| rasterize(&r, grid)) {
                Ok(_) => {}
                Err(e) => problems.push(format!("initial section: {e}")),
            }
        }
        problems
    }
}

fn implicit_intervals(phi: &Expr, t: f64, (lo, hi): (f64, f64)) -> Result<Vec<(f64, f64)>> {
    const SCAN: usize = 4096;
    let f = |x: f64| phi.eval(&Vars { t, x, ..Default::default() });
    let xs: Vec<f64> = (0..=SCAN).map(|i| lo + (hi - lo) * i as f64 / SCAN as f64).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect::<std::result::Result<_, _>>()?;
    let root = |mut a: f64, mut b: f64| -> Result<f64> {
        let neg_at_a = f(a)? < 0.0;
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if (f(m)? < 0.0) == neg_at_a {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(0.5 * (a + b))
    };
    let mut out = Vec::new();
    let mut start: Option<f64> = if vals[0] < 0.0 { Some(lo) } else { None };
    for i in 0..SCAN {
        let (a, b) = (vals[i] < 0.0, vals[i + 1] < 0.0);
        if !a && b {
            start = Some(root(xs[i], xs[i + 1])?);
        } else if a && !b {
            let end = root(xs[i], xs[i + 1])?;
            out.push((start.take().unwrap_or(lo), end));
        }
    }
    if let Some(s) = start {
        out.push((s, hi));
    }
    Ok(out)
}

/// `Omega(t)`, right-continuous at jump times.
pub fn section(dom: &TimeDomain, t: f64) -> Result<Region> {
    dom.check_range(t)?;
    dom.region_at(t, false)
}

/// `(Omega(t-), Omega(t+))`; both equal [`section`] away from jumps and at `t = 0`.
pub fn side_limits(dom: &TimeDomain, t: f64) -> Result<(Region, Region)> {
    dom.check_range(t)?;
    let plus = dom.region_at(t, false)?;
    let minus = if t > 0.0 && dom.is_jump_time(t) {
        dom.region_at(t, true)?
    } else {
        plus.clone()
    };
    Ok((minus, plus))
}

/// `(Omega(t+) \ Omega(t-), Omega(t-) \ Omega(t+))`; both empty when `t` is
/// not a jump time.
pub fn classify_jump(dom: &TimeDomain, t: f64) -> Result<(Region, Region)> {
    if !dom.is_jump_time(t) {
        return Ok((Region::empty(), Region::empty()));
    }
    let (minus, plus) = side_limits(dom, t)?;
    match (minus.as_intervals(), plus.as_intervals()) {
        (Some(m), Some(p)) => Ok((
            Region::Intervals(interval_difference(p, m)),
            Region::Intervals(interval_difference(m, p)),
        )),
        _ => Ok((Region::empty(), Region::empty())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum NodeKind {
    Active,
    Ghost,
    Outside,
}

impl NodeKind {
    /// Flag used in frame files: 1 active, 0 ghost, -1 outside.
    pub fn flag(self) -> i8 {
        match self {
            NodeKind::Active => 1,
            NodeKind::Ghost => 0,
            NodeKind::Outside => -1,
        }
    }
}

/// Discrete carrier of a section: unknown nodes and their Dirichlet ring.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMask {
    kinds: Vec<NodeKind>,
    active: Vec<usize>,
    ghost: Vec<usize>,
}

impl DomainMask {
    pub fn kind(&self, idx: usize) -> NodeKind {
        self.kinds[idx]
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn ghost(&self) -> &[usize] {
        &self.ghost
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.kinds[idx] == NodeKind::Active
    }

    /// Active or ghost.
    pub fn is_defined(&self, idx: usize) -> bool {
        self.kinds[idx] != NodeKind::Outside
    }
}

fn raster_tol(grid: &Grid) -> f64 {
    1e-9 * grid.min_spacing()
}

/// Active nodes lie inside the open region with every grid neighbour in its
/// closure; ghosts are the inactive neighbours of active nodes.
pub fn rasterize(region: &Region, grid: &Grid) -> Result<DomainMask> {
    let h = grid.min_spacing();
    let tol = raster_tol(grid);
    if let Some(list) = region.as_intervals() {
        if let Some(&(a, b)) = list
            .iter()
            .min_by(|x, y| (x.1 - x.0).total_cmp(&(y.1 - y.0)))
        {
            if b - a < 2.0 * h - tol {
                return Err(GeometryError::DegenerateSection {
                    t: None,
                    min_feature: b - a,
                    spacing: h,
                });
            }
        }
    }
    let n = grid.node_count();
    let mut inside = vec![false; n];
    let mut closed = vec![false; n];
    for idx in 0..n {
        let lv = region.level(&grid.point(idx))?;
        inside[idx] = lv < -tol;
        closed[idx] = lv <= tol;
    }
    let mut kinds = vec![NodeKind::Outside; n];
    for idx in 0..n {
        if !inside[idx] {
            continue;
        }
        let (nbrs, missing) = grid.neighbors(idx);
        if missing == 0 && nbrs.iter().all(|&m| closed[m]) {
            kinds[idx] = NodeKind::Active;
        }
    }
    let active: Vec<usize> = (0..n).filter(|&i| kinds[i] == NodeKind::Active).collect();
    if active.is_empty() {
        return Err(GeometryError::DegenerateSection {
            t: None,
            min_feature: region_width_estimate(&inside, grid),
            spacing: h,
        });
    }
    for &idx in &active {
        for m in grid.neighbors(idx).0 {
            if kinds[m] == NodeKind::Outside {
                kinds[m] = NodeKind::Ghost;
            }
        }
    }
    if grid.dim() == 2 {
        check_components_survive(&inside, &kinds, grid)?;
    }
    let ghost = (0..n).filter(|&i| kinds[i] == NodeKind::Ghost).collect();
    Ok(DomainMask {
        kinds,
        active,
        ghost,
    })
}

fn region_width_estimate(inside: &[bool], grid: &Grid) -> f64 {
    let count = inside.iter().filter(|&&b| b).count();
    count as f64 * grid.min_spacing()
}

/// Every edge-connected component of inside nodes must keep at least one
/// active node; otherwise a piece of the section is too thin for the grid.
fn check_components_survive(inside: &[bool], kinds: &[NodeKind], grid: &Grid) -> Result<()> {
    let n = inside.len();
    let mut seen = vec![false; n];
    for start in 0..n {
        if !inside[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0usize;
        let mut has_active = false;
        while let Some(i) = stack.pop() {
            size += 1;
            has_active |= kinds[i] == NodeKind::Active;
            for m in grid.neighbors(i).0 {
                if inside[m] && !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        if !has_active {
            return Err(GeometryError::DegenerateSection {
                t: None,
                min_feature: (size as f64).sqrt() * grid.min_spacing(),
                spacing: grid.min_spacing(),
            });
        }
    }
    Ok(())
}

/// Knots, frozen masks and mesh width of the time-slicing scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePlan {
    knots: Vec<f64>,
    masks: Vec<DomainMask>,
    delta: f64,
}

impl SlicePlan {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn masks(&self) -> &[DomainMask] {
        &self.masks
    }

    pub fn mask(&self, k: usize) -> &DomainMask {
        &self.masks[k]
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn n_slices(&self) -> usize {
        self.masks.len()
    }

    pub fn span(&self, k: usize) -> (f64, f64) {
        (self.knots[k], self.knots[k + 1])
    }
}

/// Knots are every jump time plus a uniform subdivision of each smooth span;
/// slice `k` is frozen at `Omega(t_k+)`.
pub fn build_slice_plan(dom: &TimeDomain, grid: &Grid, n_slices: usize) -> Result<SlicePlan> {
    if n_slices == 0 {
        return Err(GeometryError::NoSlices);
    }
    let knots = plan_knots(dom, n_slices);
    let mut masks = Vec::with_capacity(knots.len() - 1);
    for &t in &knots[..knots.len() - 1] {
        let region = section(dom, t)?;
        let mask = rasterize(&region, grid).map_err(|e| match e {
            GeometryError::DegenerateSection {
                min_feature,
                spacing,
                ..
            } => GeometryError::DegenerateSection {
                t: Some(t),
                min_feature,
                spacing,
            },
            other => other,
        })?;
        masks.push(mask);
    }
    let delta = max_gap(&knots);
    Ok(SlicePlan {
        knots,
        masks,
        delta,
    })
}

pub fn max_gap(knots: &[f64]) -> f64 {
    knots
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max)
}

fn plan_knots(dom: &TimeDomain, n_slices: usize) -> Vec<f64> {
    let horizon = dom.horizon();
    let mut breaks = vec![0.0];
    breaks.extend(dom.jump_times());
    breaks.push(horizon);
    let mut knots = vec![0.0];
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let pieces = ((n_slices as f64 * (b - a) / horizon).ceil() as usize).max(1);
        for i in 1..pieces {
            knots.push(a + (b - a) * i as f64 / pieces as f64);
        }
        knots.push(b);
    }
    knots
}

/// A set sampled by membership queries over a bounding box.
pub trait PointSet {
    fn dim(&self) -> usize;
    fn bounds(&self) -> Vec<(f64, f64)>;
    fn contains(&self, p: &[f64]) -> bool;
}

/// Closed fixed-time union of intervals.
pub struct IntervalSet(pub Vec<(f64, f64)>);

impl PointSet for IntervalSet {
    fn dim(&self) -> usize {
        1
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let lo = self.0.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = self.0.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        vec![(lo, hi)]
    }

    fn contains(&self, p: &[f64]) -> bool {
        self.0.iter().any(|&(a, b)| a <= p[0] && p[0] <= b)
    }
}

/// Closure of the space-time domain, points `(t, x..)`.
pub struct SpaceTimeSet<'a> {
    dom: &'a TimeDomain,
    spatial: Vec<(f64, f64)>,
    tol: f64,
}

impl<'a> SpaceTimeSet<'a> {
    pub fn new(dom: &'a TimeDomain) -> Result<Self> {
        let spatial = dom.spatial_bounds()?;
        let tol = 1e-12 * spatial.iter().map(|b| b.1 - b.0).fold(1.0, f64::max);
        Ok(SpaceTimeSet { dom, spatial, tol })
    }
}

impl PointSet for SpaceTimeSet<'_> {
    fn dim(&self) -> usize {
        self.dom.dim() + 1
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(0.0, self.dom.horizon())];
        b.extend(self.spatial.iter().copied());
        b
    }

    fn contains(&self, p: &[f64]) -> bool {
        match side_limits(self.dom, p[0]) {
            Ok((a, b)) => [a, b]
                .iter()
                .any(|r| r.contains_closed(&p[1..], self.tol).unwrap_or(false)),
            Err(_) => false,
        }
    }
}

/// Closure of the slab union of `[t_k, t_{k+1}] x Omega(t_k+)`.
pub struct SlabSet<'a> {
    dom: &'a TimeDomain,
    sections: Vec<Region>,
    knots: Vec<f64>,
    spatial: Vec<(f64, f64)>,
    tol: f64,
}

impl<'a> SlabSet<'a> {
    pub fn new(dom: &'a TimeDomain, knots: &[f64]) -> Result<Self> {
        let sections = knots[..knots.len() - 1]
            .iter()
            .map(|&t| section(dom, t))
            .collect::<Result<Vec<_>>>()?;
        let spatial = dom.spatial_bounds()?;
        let tol = 1e-12 * spatial.iter().map(|b| b.1 - b.0).fold(1.0, f64::max);
        Ok(SlabSet {
            dom,
            sections,
            knots: knots.to_vec(),
            spatial,
            tol,
        })
    }

    pub fn from_plan(dom: &'a TimeDomain, plan: &SlicePlan) -> Result<Self> {
        SlabSet::new(dom, plan.knots())
    }
}

impl PointSet for SlabSet<'_> {
    fn dim(&self) -> usize {
        self.dom.dim() + 1
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(0.0, self.dom.horizon())];
        b.extend(self.spatial.iter().copied());
        b
    }

    fn contains(&self, p: &[f64]) -> bool {
        let t = p[0];
        self.sections.iter().enumerate().any(|(k, r)| {
            self.knots[k] <= t
                && t <= self.knots[k + 1]
                && r.contains_closed(&p[1..], self.tol).unwrap_or(false)
        })
    }
}

/// Symmetric Hausdorff distance of two point sets sampled on a common lattice
/// of step at most `resolution`.
pub fn hausdorff_distance(a: &dyn PointSet, b: &dyn PointSet, resolution: f64) -> Result<f64> {
    assert_eq!(a.dim(), b.dim(), "point sets must share a dimension");
    let dim = a.dim();
    let (ba, bb) = (a.bounds(), b.bounds());
    let mut lo = Vec::with_capacity(dim);
    let mut steps = Vec::with_capacity(dim);
    let mut counts = Vec::with_capacity(dim);
    for d in 0..dim {
        let l = ba[d].0.min(bb[d].0);
        let h = ba[d].1.max(bb[d].1);
        if !(l.is_finite() && h.is_finite()) {
            return Err(GeometryError::UndefinedDistance);
        }
        let n = (((h - l) / resolution).ceil() as usize).max(1);
        lo.push(l);
        steps.push((h - l) / n as f64);
        counts.push(n + 1);
    }
    let lattice = Lattice { lo, steps, counts };
    let total: usize = lattice.counts.iter().product();
    let mut in_a = vec![false; total];
    let mut in_b = vec![false; total];
    let mut p = vec![0.0; dim];
    for idx in 0..total {
        lattice.point(idx, &mut p);
        in_a[idx] = a.contains(&p);
        in_b[idx] = b.contains(&p);
    }
    if !in_a.iter().any(|&x| x) || !in_b.iter().any(|&x| x) {
        return Err(GeometryError::UndefinedDistance);
    }
    Ok(lattice
        .directed(&in_a, &in_b)
        .max(lattice.directed(&in_b, &in_a)))
}

struct Lattice {
    lo: Vec<f64>,
    steps: Vec<f64>,
    counts: Vec<usize>,
}

impl Lattice {
    fn multi(&self, mut idx: usize) -> Vec<usize> {
        let mut m = Vec::with_capacity(self.counts.len());
        for &c in &self.counts {
            m.push(idx % c);
            idx /= c;
        }
        m
    }

    fn point(&self, idx: usize, out: &mut [f64]) {
        for (d, k) in self.multi(idx).into_iter().enumerate() {
            out[d] = self.lo[d] + k as f64 * self.steps[d];
        }
    }

    fn is_boundary(&self, idx: usize, member: &[bool]) -> bool {
        let m = self.multi(idx);
        let mut stride = 1;
        for (d, &c) in self.counts.iter().enumerate() {
            if m[d] == 0 || m[d] + 1 == c {
                return true;
            }
            if !member[idx - stride] || !member[idx + stride] {
                return true;
            }
            stride *= c;
        }
        false
    }

    /// `max_{p in from} min_{q in to} |p - q|` over lattice members.
    fn directed(&self, from: &[bool], to: &[bool]) -> f64 {
        let dim = self.counts.len();
        let targets: Vec<Vec<f64>> = (0..from.len())
            .filter(|&i| to[i] && self.is_boundary(i, to))
            .map(|i| {
                let mut p = vec![0.0; dim];
                self.point(i, &mut p);
                p
            })
            .collect();
        let index = BucketIndex::new(targets, 4.0 * self.steps.iter().copied().fold(0.0, f64::max));
        let mut worst: f64 = 0.0;
        let mut p = vec![0.0; dim];
        for i in 0..from.len() {
            if from[i] && !to[i] {
                self.point(i, &mut p);
                worst = worst.max(index.nearest(&p));
            }
        }
        worst
    }
}

/// Uniform bucket grid for exact nearest-neighbour queries.
struct BucketIndex {
    points: Vec<Vec<f64>>,
    cell: f64,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
    extent: i64,
}

impl BucketIndex {
    fn new(points: Vec<Vec<f64>>, cell: f64) -> Self {
        let cell = if cell > 0.0 { cell } else { 1.0 };
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        let mut extent = 0;
        for (i, p) in points.iter().enumerate() {
            let key = Self::key(p, cell);
            extent = key.iter().fold(extent, |m, k| m.max(k.abs()));
            buckets.entry(key).or_default().push(i);
        }
        BucketIndex {
            points,
            cell,
            buckets,
            extent,
        }
    }

    fn key(p: &[f64], cell: f64) -> Vec<i64> {
        p.iter().map(|v| (v / cell).floor() as i64).collect()
    }

    fn nearest(&self, q: &[f64]) -> f64 {
        if self.points.is_empty() {
            return f64::INFINITY;
        }
        let center = Self::key(q, self.cell);
        let reach = center.iter().fold(self.extent, |m, k| m.max(k.abs())) * 2 + 2;
        let mut best = f64::INFINITY;
        for ring in 0..=reach {
            if best.is_finite() && best <= (ring as f64 - 1.0) * self.cell {
                break;
            }
            for offset in ring_offsets(center.len(), ring) {
                let key: Vec<i64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
                if let Some(list) = self.buckets.get(&key) {
                    for &i in list {
                        let d2: f64 = self.points[i]
                            .iter()
                            .zip(q)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        best = best.min(d2.sqrt());
                    }
                }
            }
        }
        best
    }
}

/// Integer offsets with Chebyshev norm exactly `ring`.
fn ring_offsets(dim: usize, ring: i64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![-ring; dim];
    loop {
        if cur.iter().any(|c| c.abs() == ring) {
            out.push(cur.clone());
        }
        let mut d = 0;
        loop {
            if d == dim {
                return out;
            }
            cur[d] += 1;
            if cur[d] <= ring {
                break;
            }
            cur[d] = -ring;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn e(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    fn growing() -> TimeDomain {
        TimeDomain::moving_intervals(vec![Track::smooth(e("0"), e("1+t"))], 1.0)
    }

    fn jumping(from: &str, to: &str) -> TimeDomain {
        TimeDomain::moving_intervals(
            vec![Track::smooth(e("0"), e(from)).with_jump(0.5, e("0"), e(to))],
            1.0,
        )
    }

    #[test]
    fn section_examples() {
        assert_eq!(
            section(&growing(), 0.5).unwrap(),
            Region::Intervals(vec![(0.0, 1.5)])
        );
        assert_eq!(
            section(&jumping("1", "2"), 0.5).unwrap(),
            Region::Intervals(vec![(0.0, 2.0)])
        );
        let imp = TimeDomain::implicit(e("abs(x) - (1+t)"), 1, &[(-3.0, 3.0)], 1.0);
        let r = section(&imp, 0.0).unwrap();
        let iv = r.as_intervals().unwrap();
        assert_eq!(iv.len(), 1);
        assert!((iv[0].0 + 1.0).abs() < 1e-12 && (iv[0].1 - 1.0).abs() < 1e-12);
        assert!(matches!(
            section(&growing(), 1.5),
            Err(GeometryError::OutOfRange { .. })
        ));
        assert!(section(&growing(), -0.1).is_err());
    }

    #[test]
    fn side_limit_examples() {
        let (m, p) = side_limits(&jumping("1", "2"), 0.5).unwrap();
        assert_eq!(m, Region::Intervals(vec![(0.0, 1.0)]));
        assert_eq!(p, Region::Intervals(vec![(0.0, 2.0)]));
        let (m, p) = side_limits(&growing(), 0.3).unwrap();
        assert_eq!(m, p);
        assert_eq!(m, Region::Intervals(vec![(0.0, 1.3)]));
        let (m, p) = side_limits(&growing(), 0.0).unwrap();
        assert_eq!(m, p);
        assert!(side_limits(&growing(), 2.0).is_err());
    }

    #[test]
    fn right_continuity() {
        let dom = jumping("1", "2");
        let (_, plus) = side_limits(&dom, 0.5).unwrap();
        for h in [1e-3, 1e-6, 1e-9] {
            let r = section(&dom, 0.5 + h).unwrap();
            let (a, b) = (r.as_intervals().unwrap()[0], plus.as_intervals().unwrap()[0]);
            assert!((a.1 - b.1).abs() < 1e-8);
        }
    }

    #[test]
    fn jump_classification() {
        let (exp, con) = classify_jump(&jumping("1", "2"), 0.5).unwrap();
        assert_eq!(exp, Region::Intervals(vec![(1.0, 2.0)]));
        assert!(con.is_empty());
        let (exp, con) = classify_jump(&jumping("2", "1"), 0.5).unwrap();
        assert!(exp.is_empty());
        assert_eq!(con, Region::Intervals(vec![(1.0, 2.0)]));
        let (exp, con) = classify_jump(&jumping("1", "2"), 0.25).unwrap();
        assert!(exp.is_empty() && con.is_empty());
    }

    #[test]
    fn rasterize_by_hand() {
        let grid = Grid::uniform_1d(-0.5, 2.5, 12).unwrap();
        let mask = rasterize(&Region::intervals(vec![(0.0, 1.0)]), &grid).unwrap();
        let xs = |ids: &[usize]| ids.iter().map(|&i| grid.coords(i)[0]).collect::<Vec<_>>();
        assert_eq!(xs(mask.active()), vec![0.25, 0.5, 0.75]);
        assert_eq!(xs(mask.ghost()), vec![0.0, 1.0]);
    }

    #[test]
    fn rasterize_rejects_thin_regions() {
        let grid = Grid::uniform_1d(-0.5, 2.5, 12).unwrap();
        let err = rasterize(&Region::intervals(vec![(0.1, 0.55)]), &grid).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateSection { .. }));
    }

    #[test]
    fn rasterize_full_box() {
        let grid = Grid::uniform_1d(0.0, 1.0, 10).unwrap();
        let mask = rasterize(&Region::intervals(vec![(-1.0, 2.0)]), &grid).unwrap();
        assert_eq!(mask.active().len(), 9);
        assert_eq!(mask.ghost().len(), 2);
    }

    #[test]
    fn mask_invariants_2d() {
        let grid = Grid::new(&[-1.5, -1.5], &[0.1, 0.1], &[30, 30]).unwrap();
        let dom = TimeDomain::implicit(e("x^2 + y^2 - 1"), 2, &[(-1.5, 1.5), (-1.5, 1.5)], 1.0);
        let mask = rasterize(&section(&dom, 0.0).unwrap(), &grid).unwrap();
        for &a in mask.active() {
            for m in grid.neighbors(a).0 {
                assert!(mask.is_defined(m));
            }
        }
        for &g in mask.ghost() {
            assert!(!mask.is_active(g));
            assert!(grid.neighbors(g).0.iter().any(|&m| mask.is_active(m)));
        }
    }

    #[test]
    fn mask_monotone_in_region() {
        let grid = Grid::uniform_1d(-1.0, 3.0, 64).unwrap();
        let small = rasterize(&Region::intervals(vec![(0.2, 1.1)]), &grid).unwrap();
        let big = rasterize(&Region::intervals(vec![(0.1, 1.7)]), &grid).unwrap();
        for &i in small.active() {
            assert!(big.is_active(i));
        }
    }

    #[test]
    fn plan_examples() {
        let grid = Grid::uniform_1d(-0.5, 2.5, 48).unwrap();
        let plan = build_slice_plan(&growing(), &grid, 4).unwrap();
        assert_eq!(plan.knots(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(plan.delta(), 0.25);
        assert_eq!(plan.n_slices(), 4);

        let dom = TimeDomain::moving_intervals(
            vec![Track::smooth(e("0"), e("1")).with_jump(0.3, e("0"), e("1.5"))],
            1.0,
        );
        let plan = build_slice_plan(&dom, &grid, 2).unwrap();
        assert!(plan.knots().contains(&0.3));
        assert!(plan.knots().len() >= 3);
        assert_eq!(plan.delta(), max_gap(plan.knots()));

        let plan = build_slice_plan(&growing(), &grid, 1).unwrap();
        assert_eq!(plan.knots(), &[0.0, 1.0]);
        assert!(build_slice_plan(&growing(), &grid, 0).is_err());
    }

    #[test]
    fn plan_masks_use_right_limits() {
        let grid = Grid::uniform_1d(-0.5, 2.5, 12).unwrap();
        let dom = jumping("1", "2");
        let plan = build_slice_plan(&dom, &grid, 2).unwrap();
        let k = plan.knots().iter().position(|&t| t == 0.5).unwrap();
        let expect = rasterize(&section(&dom, 0.5).unwrap(), &grid).unwrap();
        assert_eq!(plan.mask(k), &expect);
    }

    #[test]
    fn degenerate_plan_reports_knot() {
        let grid = Grid::uniform_1d(-0.5, 2.5, 12).unwrap();
        let dom = TimeDomain::moving_intervals(
            vec![Track::smooth(e("0"), e("1")).with_jump(0.5, e("0"), e("0.3"))],
            1.0,
        );
        match build_slice_plan(&dom, &grid, 2) {
            Err(GeometryError::DegenerateSection { t, .. }) => assert_eq!(t, Some(0.5)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hausdorff_examples() {
        let unit = IntervalSet(vec![(0.0, 1.0)]);
        assert_eq!(hausdorff_distance(&unit, &unit, 0.01).unwrap(), 0.0);
        let two = IntervalSet(vec![(0.0, 2.0)]);
        let d = hausdorff_distance(&unit, &two, 0.01).unwrap();
        assert!((d - 1.0).abs() <= 0.01);
        assert!(hausdorff_distance(&unit, &IntervalSet(vec![]), 0.01).is_err());
    }

    #[test]
    fn validate_reports_margin_and_overlap() {
        let grid = Grid::uniform_1d(0.0, 2.0, 20).unwrap();
        let dom = TimeDomain::moving_intervals(vec![Track::smooth(e("0.05"), e("1"))], 1.0);
        assert!(!dom.validate(&grid).is_empty());
        let dom = TimeDomain::moving_intervals(
            vec![
                Track::smooth(e("0.3"), e("1")),
                Track::smooth(e("0.9"), e("1.5")),
            ],
            1.0,
        );
        assert!(dom.validate(&grid).iter().any(|p| p.contains("overlap")));
        let dom = TimeDomain::moving_intervals(vec![Track::smooth(e("0.3"), e("1.5"))], 1.0);
        assert!(dom.validate(&grid).is_empty());
    }

    #[test]
    fn geometry_is_deterministic() {
        let grid = Grid::uniform_1d(-0.5, 2.5, 48).unwrap();
        let a = build_slice_plan(&growing(), &grid, 8).unwrap();
        let b = build_slice_plan(&growing(), &grid, 8).unwrap();
        assert_eq!(a, b);
    }
}
