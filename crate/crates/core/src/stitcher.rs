//! Runs the slices in sequence and glues them into a space-time field.

use std::ops::Range;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, ExprError, Vars};
use crate::flux::FluxModel;
use crate::geometry::{build_slice_plan, DomainMask, GeometryError, Grid, SlicePlan, TimeDomain};
use crate::slice_solver::{solve_slice, BoundaryData, SliceProblem, SolverConfig, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StitchError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("slice {slice}: {source}")]
    Slice { slice: usize, source: SolverError },
    #[error("initial data: {0}")]
    InitialData(String),
    #[error("knot index {k} out of range 1..={max}")]
    KnotOutOfRange { k: usize, max: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

impl StitchError {
    pub fn is_stall(&self) -> bool {
        matches!(
            self,
            StitchError::Slice {
                source: SolverError::Stall { .. },
                ..
            }
        )
    }
}

pub type Result<T> = std::result::Result<T, StitchError>;

/// Seconds since the call; always 0 on wasm32, which has no clock.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    All,
    #[default]
    Knots,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputOptions {
    pub dir: Option<PathBuf>,
    pub frames: FrameMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: Grid,
    pub domain: TimeDomain,
    pub n_slices: usize,
    /// Backward Euler steps per slice.
    pub substeps: usize,
    pub flux: FluxModel,
    pub boundary: BoundaryData,
    pub u0: Expr,
    pub source: Expr,
    pub solver: SolverConfig,
    pub output: OutputOptions,
}

impl Scenario {
    pub fn horizon(&self) -> f64 {
        self.domain.horizon()
    }

    pub fn has_source(&self) -> bool {
        !self.source.is_zero_literal()
    }

    pub fn plan(&self) -> Result<SlicePlan> {
        Ok(build_slice_plan(&self.domain, &self.grid, self.n_slices)?)
    }

    /// Same scenario with different initial data.
    pub fn with_u0(&self, u0: Expr) -> Scenario {
        Scenario {
            u0,
            ..self.clone()
        }
    }

    pub fn with_slices(&self, n_slices: usize) -> Scenario {
        Scenario {
            n_slices,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stamp {
    pub t: f64,
    pub slice: usize,
}

/// Glued field `u` (NaN off the slice's active and ghost nodes) and its
/// extension by `psi`, on every substep of every slice. Each slice
/// contributes its initial frame and all substep frames, so a knot appears
/// twice: as the end of slice `k - 1` and the start of slice `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub plan: SlicePlan,
    pub stamps: Vec<Stamp>,
    pub frames: Vec<Vec<f64>>,
    pub extended_frames: Vec<Vec<f64>>,
    ranges: Vec<Range<usize>>,
}

impl SpaceTimeField {
    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    /// Frame indices belonging to slice `k`.
    pub fn slice_range(&self, k: usize) -> Range<usize> {
        self.ranges[k].clone()
    }

    pub fn mask_at(&self, frame: usize) -> &DomainMask {
        self.plan.mask(self.stamps[frame].slice)
    }

    pub fn final_frame(&self) -> &[f64] {
        self.frames.last().expect("field has frames")
    }

    /// Frame indices at the slice knots `t_0, ..., t_N`: slice starts, then
    /// the final frame.
    pub fn knot_frames(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.ranges.iter().map(|r| r.start).collect();
        out.push(self.len() - 1);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceStats {
    pub slice: usize,
    pub span: (f64, f64),
    pub active_nodes: usize,
    pub newton_iterations: usize,
    pub picard_iterations: usize,
    pub max_residual: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub n_slices: usize,
    pub delta: f64,
    pub knots: Vec<f64>,
    pub slices: Vec<SliceStats>,
    pub wall_seconds: f64,
}

/// Initial frame of a slice from the end frame of the previous one: copy on
/// the common active set, `psi(t_k)` on new active nodes and on ghosts.
pub fn transfer(
    grid: &Grid,
    end_frame_prev: &[f64],
    mask_prev: &DomainMask,
    mask_next: &DomainMask,
    boundary: &BoundaryData,
    t_k: f64,
) -> std::result::Result<Vec<f64>, ExprError> {
    let mut out = vec![f64::NAN; grid.node_count()];
    for &i in mask_next.active() {
        out[i] = if mask_prev.is_active(i) {
            end_frame_prev[i]
        } else {
            boundary.psi(t_k, &grid.point(i))?
        };
    }
    for &g in mask_next.ghost() {
        out[g] = boundary.psi(t_k, &grid.point(g))?;
    }
    Ok(out)
}

fn initial_frame(scn: &Scenario, mask: &DomainMask) -> Result<Vec<f64>> {
    let grid = &scn.grid;
    let mut out = vec![f64::NAN; grid.node_count()];
    for &i in mask.active() {
        let x = grid.point(i);
        let v = scn.u0.eval(&Vars::at(0.0, &x))?;
        if !v.is_finite() {
            return Err(StitchError::InitialData(format!(
                "u0 is not finite at x = {x:?}"
            )));
        }
        out[i] = v;
    }
    for &g in mask.ghost() {
        out[g] = scn.boundary.psi(0.0, &grid.point(g))?;
    }
    Ok(out)
}

fn extend(grid: &Grid, frame: &[f64], mask: &DomainMask, boundary: &BoundaryData, t: f64) -> Result<Vec<f64>> {
    (0..grid.node_count())
        .map(|i| {
            if mask.is_active(i) {
                Ok(frame[i])
            } else {
                Ok(boundary.psi(t, &grid.point(i))?)
            }
        })
        .collect()
}

pub fn run_scheme(scn: &Scenario) -> Result<(SpaceTimeField, RunReport)> {
    let elapsed = stopwatch();
    let plan = scn.plan()?;
    let n = plan.n_slices();
    let mut stamps = Vec::new();
    let mut frames: Vec<Vec<f64>> = Vec::new();
    let mut ranges = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);

    for k in 0..n {
        let slice_elapsed = stopwatch();
        let mask = plan.mask(k);
        let span = plan.span(k);
        let initial = if k == 0 {
            initial_frame(scn, mask)?
        } else {
            let prev = frames.last().expect("previous slice");
            transfer(&scn.grid, prev, plan.mask(k - 1), mask, &scn.boundary, span.0)?
        };
        let problem = SliceProblem {
            grid: &scn.grid,
            mask,
            flux: &scn.flux,
            freeze_time: span.0,
            span,
            substeps: scn.substeps,
            boundary: &scn.boundary,
            initial,
            source: &scn.source,
            solver: scn.solver.clone(),
        };
        let sol = solve_slice(&problem).map_err(|source| StitchError::Slice { slice: k, source })?;
        let start = frames.len();
        for (t, f) in sol.times.iter().zip(sol.frames) {
            stamps.push(Stamp { t: *t, slice: k });
            frames.push(f);
        }
        ranges.push(start..frames.len());
        stats.push(SliceStats {
            slice: k,
            span,
            active_nodes: mask.active().len(),
            newton_iterations: sol.newton_iterations.iter().sum(),
            picard_iterations: sol.picard_iterations.iter().sum(),
            max_residual: sol.residual_norms.iter().fold(0.0, |a, &b| a.max(b)),
            wall_seconds: slice_elapsed(),
        });
    }

    let extended_frames = frames
        .iter()
        .zip(&stamps)
        .map(|(f, s)| extend(&scn.grid, f, plan.mask(s.slice), &scn.boundary, s.t))
        .collect::<Result<Vec<_>>>()?;

    let report = RunReport {
        n_slices: n,
        delta: plan.delta(),
        knots: plan.knots().to_vec(),
        slices: stats,
        wall_seconds: elapsed(),
    };
    let field = SpaceTimeField {
        plan,
        stamps,
        frames,
        extended_frames,
        ranges,
    };
    Ok((field, report))
}

/// Traces at interior knot `k`: last frame of slice `k - 1` and initial
/// frame of slice `k`.
pub fn knot_traces(field: &SpaceTimeField, k: usize) -> Result<(&[f64], &[f64])> {
    let max = field.plan.n_slices().saturating_sub(1);
    if k == 0 || k > max {
        return Err(StitchError::KnotOutOfRange { k, max });
    }
    let minus = field.slice_range(k - 1).end - 1;
    let plus = field.slice_range(k).start;
    Ok((&field.frames[minus], &field.frames[plus]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::geometry::{rasterize, Region, Track};

    fn e(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    fn scenario(domain: TimeDomain, grid: Grid, u0: &str, psi: &str) -> Scenario {
        Scenario {
            grid,
            domain,
            n_slices: 4,
            substeps: 3,
            flux: FluxModel::linear_diffusion(),
            boundary: BoundaryData::new(e(psi)),
            u0: e(u0),
            source: Expr::constant(0.0),
            solver: SolverConfig::default(),
            output: OutputOptions::default(),
        }
    }

    fn jumping() -> TimeDomain {
        let track = Track::smooth(e("0"), e("1 + 0.5 * t"))
            .with_jump(0.3, e("0"), e("2"))
            .with_jump(0.6, e("0.25"), e("1.25"));
        TimeDomain::moving_intervals(vec![track], 1.0)
    }

    #[test]
    fn transfer_rule_cases() {
        let grid = Grid::uniform_1d(-0.5, 2.5, 12).unwrap();
        let small = rasterize(&Region::intervals(vec![(0.0, 1.0)]), &grid).unwrap();
        let big = rasterize(&Region::intervals(vec![(0.0, 2.0)]), &grid).unwrap();
        let bd = BoundaryData::new(Expr::constant(5.0));
        let prev: Vec<f64> = (0..grid.node_count())
            .map(|i| if small.is_defined(i) { i as f64 } else { f64::NAN })
            .collect();

        let same = transfer(&grid, &prev, &small, &small, &bd, 0.5).unwrap();
        for &i in small.active() {
            assert_eq!(same[i], prev[i]);
        }
        for &g in small.ghost() {
            assert_eq!(same[g], 5.0);
        }

        let grown = transfer(&grid, &prev, &small, &big, &bd, 0.5).unwrap();
        for &i in big.active() {
            let want = if small.is_active(i) { prev[i] } else { 5.0 };
            assert_eq!(grown[i], want);
        }

        let big_prev: Vec<f64> = (0..grid.node_count()).map(|i| i as f64 * 0.5).collect();
        let shrunk = transfer(&grid, &big_prev, &big, &small, &bd, 0.5).unwrap();
        for &i in small.active() {
            assert_eq!(shrunk[i], big_prev[i]);
        }
    }

    #[test]
    fn constants_survive_jumps() {
        let grid = Grid::uniform_1d(-0.25, 2.25, 20).unwrap();
        let scn = scenario(jumping(), grid, "3", "3");
        let (field, report) = run_scheme(&scn).unwrap();
        assert!(report.n_slices >= 4);
        for (f, s) in field.frames.iter().zip(&field.stamps) {
            let mask = field.plan.mask(s.slice);
            for i in 0..f.len() {
                if mask.is_defined(i) {
                    assert_eq!(f[i], 3.0);
                } else {
                    assert!(f[i].is_nan());
                }
            }
        }
        for f in &field.extended_frames {
            assert!(f.iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn gluing_and_knot_consistency() {
        let grid = Grid::uniform_1d(-0.25, 2.25, 40).unwrap();
        let mut scn = scenario(jumping(), grid, "sin(pi * x)", "0.1 * x + t");
        scn.flux = FluxModel::p_laplacian(3.0, 1e-8);
        let (field, _) = run_scheme(&scn).unwrap();
        for ((f, ext), s) in field.frames.iter().zip(&field.extended_frames).zip(&field.stamps) {
            let mask = field.plan.mask(s.slice);
            for i in 0..f.len() {
                if mask.is_active(i) {
                    assert_eq!(ext[i], f[i]);
                } else {
                    let want = scn.boundary.psi(s.t, &scn.grid.point(i)).unwrap();
                    assert_eq!(ext[i], want);
                }
            }
        }
        for k in 1..field.plan.n_slices() {
            let (minus, plus) = knot_traces(&field, k).unwrap();
            let again = transfer(
                &scn.grid,
                minus,
                field.plan.mask(k - 1),
                field.plan.mask(k),
                &scn.boundary,
                field.plan.knots()[k],
            )
            .unwrap();
            for i in 0..plus.len() {
                assert!(plus[i] == again[i] || (plus[i].is_nan() && again[i].is_nan()));
            }
        }
        assert!(knot_traces(&field, 0).is_err());
        assert!(knot_traces(&field, field.plan.n_slices()).is_err());
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let grid = Grid::uniform_1d(-0.25, 2.25, 40).unwrap();
        let mut scn = scenario(jumping(), grid, "x * (2 - x)", "0");
        scn.flux = FluxModel::z_modulated(1.5, 1e-8);
        let (a, _) = run_scheme(&scn).unwrap();
        let (b, _) = run_scheme(&scn).unwrap();
        assert_eq!(a.stamps, b.stamps);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            let ba: Vec<u64> = fa.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = fb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn heat_peak_after_decay() {
        let grid = Grid::uniform_1d(0.0, 1.0, 64).unwrap();
        let dom = TimeDomain::moving_intervals(vec![Track::smooth(e("0"), e("1"))], 0.1);
        let mut scn = scenario(dom, grid, "sin(pi * x)", "0");
        scn.n_slices = 10;
        scn.substeps = 20;
        let (field, _) = run_scheme(&scn).unwrap();
        let peak = field.final_frame()[32];
        let exact = (-std::f64::consts::PI.powi(2) * 0.1).exp();
        assert!((exact - 0.3727).abs() < 1e-4);
        assert!((peak - exact).abs() < 3e-3, "peak {peak}");
    }

    #[test]
    fn bad_initial_data_is_reported() {
        let grid = Grid::uniform_1d(0.0, 1.0, 8).unwrap();
        let dom = TimeDomain::moving_intervals(vec![Track::smooth(e("0"), e("1"))], 0.1);
        let scn = scenario(dom, grid, "log(x - 0.5)", "0");
        assert!(run_scheme(&scn).is_err());
    }
}
