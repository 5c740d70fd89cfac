//! Discrete checks of the a priori estimates and convergence behaviour on
//! computed fields.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, ExprError, Vars};
use crate::geometry::{hausdorff_distance, GeometryError, SlabSet, SpaceTimeSet};
use crate::slice_solver::FluxOperator;
use crate::stitcher::{run_scheme, Scenario, SpaceTimeField, StitchError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticError {
    #[error("diagnostic not applicable: {0}")]
    Inapplicable(String),
    #[error(transparent)]
    Run(#[from] StitchError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Solver(#[from] crate::slice_solver::SolverError),
}

impl DiagnosticError {
    pub fn is_stall(&self) -> bool {
        matches!(self, DiagnosticError::Run(e) if e.is_stall())
    }
}

pub type Result<T> = std::result::Result<T, DiagnosticError>;

/// Tolerance for checks that are exact up to roundoff.
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportDetail {
    pub label: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

/// Outcome of an inequality check `lhs <= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: Vec<ReportDetail>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series_nonincreasing: Option<bool>,
}

impl EstimateReport {
    fn new(name: &str, lhs: f64, rhs: f64, tolerance: f64, details: Vec<ReportDetail>) -> Self {
        let margin = rhs - lhs;
        EstimateReport {
            name: name.to_string(),
            lhs,
            rhs,
            margin,
            tolerance,
            pass: margin >= -tolerance,
            details,
            series: Vec::new(),
            series_nonincreasing: None,
        }
    }

    /// Recomputes the pass flag from the stored numbers.
    pub fn consistent(&self) -> bool {
        let margin = self.rhs - self.lhs;
        margin == self.margin
            && self.pass == (margin >= -self.tolerance)
            && self.details.iter().all(|d| d.margin == d.rhs - d.lhs)
    }
}

fn detail(label: String, lhs: f64, rhs: f64) -> ReportDetail {
    ReportDetail {
        label,
        lhs,
        rhs,
        margin: rhs - lhs,
    }
}

fn require_no_source(scn: &Scenario, what: &str) -> Result<()> {
    if scn.has_source() {
        return Err(DiagnosticError::Inapplicable(format!(
            "{what} needs a scenario without source term"
        )));
    }
    Ok(())
}

/// Estimate of `max(|u0|_inf, |psi|_inf)`: `u0` over the active nodes of
/// the first slice, `psi` over every grid node at every time stamp.
pub fn data_bound(field: &SpaceTimeField, scn: &Scenario) -> Result<f64> {
    let grid = &scn.grid;
    let mut bound = 0.0f64;
    for &i in field.plan.mask(0).active() {
        bound = bound.max(scn.u0.eval(&Vars::at(0.0, &grid.point(i)))?.abs());
    }
    let points: Vec<Vec<f64>> = (0..grid.node_count()).map(|i| grid.point(i)).collect();
    let mut last_t = f64::NAN;
    for s in &field.stamps {
        if s.t == last_t {
            continue;
        }
        last_t = s.t;
        for x in &points {
            bound = bound.max(scn.boundary.psi(s.t, x)?.abs());
        }
    }
    Ok(bound)
}

/// `max |u|` over all frames on their active sets against the data bound.
pub fn max_principle_report(field: &SpaceTimeField, scn: &Scenario) -> Result<EstimateReport> {
    require_no_source(scn, "the maximum principle")?;
    let rhs = data_bound(field, scn)?;
    let mut lhs = 0.0f64;
    let mut details = Vec::new();
    for k in 0..field.plan.n_slices() {
        let mask = field.plan.mask(k);
        let mut worst = 0.0f64;
        for j in field.slice_range(k) {
            for &i in mask.active() {
                let v = field.frames[j][i];
                // NaN must fail the check, not vanish in max()
                worst = if v.is_nan() { f64::INFINITY } else { worst.max(v.abs()) };
            }
        }
        lhs = lhs.max(worst);
        details.push(detail(format!("slice {k}"), worst, rhs));
    }
    Ok(EstimateReport::new("max_principle", lhs, rhs, EXACT_TOL, details))
}

/// Per-slice energy inequality obtained by testing each backward Euler step
/// with `u^+ - psi^+` and applying growth, coercivity and Young's
/// inequality:
///
/// ```text
/// 1/2 |w_end|^2 + alpha/2 sum tau sum_f h^d |xi_n(u)|^p
///   <= 1/2 |w_start|^2 + 2 C sum h^d |psi^+ - psi|
///      + sum tau sum_f h^d [ (1 + c eps^p)/p |xi_n(psi)|^p + b^p'/p' + d ]
/// ```
///
/// with `w = u - psi` on active nodes, `eps^p = (2c / (alpha p'))^(p/p')` and
/// faces `f` touching the active set.
pub fn energy_report(field: &SpaceTimeField, scn: &Scenario) -> Result<EstimateReport> {
    require_no_source(scn, "the energy estimate")?;
    let flux = &scn.flux;
    let k = flux.constants();
    let (c, alpha, b, d) = (k.growth_c, k.coercivity_alpha, k.lower_b, k.lower_d);
    if !(alpha > 0.0) || ![c, b, d].iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(DiagnosticError::Inapplicable(
            "energy estimate needs declared constants with alpha > 0 and c, b, d >= 0".into(),
        ));
    }
    let p = flux.p();
    let pc = flux.p_conjugate();
    let eps_p = (2.0 * c / (alpha * pc)).powf(p / pc);
    let psi_coeff = (1.0 + c * eps_p) / p;
    let lower = b.powf(pc) / pc + d;
    let c_bar = data_bound(field, scn)?;
    let grid = &scn.grid;
    let vol = grid.cell_volume();

    let mut details = Vec::new();
    let (mut lhs_sum, mut rhs_sum) = (0.0, 0.0);
    for slice in 0..field.plan.n_slices() {
        let mask = field.plan.mask(slice);
        let op = FluxOperator::new(grid, mask, flux, field.plan.knots()[slice]);
        let range = field.slice_range(slice);
        let psi_at = |t: f64| -> Result<Vec<f64>> {
            (0..grid.node_count())
                .map(|i| Ok(scn.boundary.psi(t, &grid.point(i))?))
                .collect()
        };
        let w_norm = |u: &[f64], psi: &[f64]| -> f64 {
            0.5 * vol * mask.active().iter().map(|&i| (u[i] - psi[i]).powi(2)).sum::<f64>()
        };
        let first = range.start;
        let mut psi_prev = psi_at(field.stamps[first].t)?;
        let mut lhs = 0.0;
        let mut rhs = w_norm(&field.frames[first], &psi_prev);
        for j in range.start + 1..range.end {
            let tau = field.stamps[j].t - field.stamps[j - 1].t;
            let psi = psi_at(field.stamps[j].t)?;
            let u = &field.extended_frames[j];
            let mut grad_u = 0.0;
            let mut grad_psi = 0.0;
            let mut faces = 0usize;
            op.for_each_face(|axis, lo, hi| {
                let h = grid.spacing(axis);
                grad_u += ((u[hi] - u[lo]) / h).abs().powf(p);
                grad_psi += ((psi[hi] - psi[lo]) / h).abs().powf(p);
                faces += 1;
            });
            lhs += 0.5 * alpha * tau * vol * grad_u;
            let dpsi: f64 = mask
                .active()
                .iter()
                .map(|&i| (psi[i] - psi_prev[i]).abs())
                .sum();
            rhs += 2.0 * c_bar * vol * dpsi
                + tau * vol * (psi_coeff * grad_psi + lower * faces as f64);
            psi_prev = psi;
        }
        lhs += w_norm(&field.frames[range.end - 1], &psi_prev);
        lhs_sum += lhs;
        rhs_sum += rhs;
        details.push(detail(format!("slice {slice}"), lhs, rhs));
    }
    let mut report = EstimateReport::new("energy", lhs_sum, rhs_sum, EXACT_TOL, details);
    // The global verdict also needs every slice to hold on its own.
    report.pass &= report.details.iter().all(|d| d.margin >= -EXACT_TOL);
    Ok(report)
}

/// Worst per-slice margin of an energy report.
pub fn worst_slice_margin(report: &EstimateReport) -> f64 {
    report
        .details
        .iter()
        .map(|d| d.margin)
        .fold(f64::INFINITY, f64::min)
}

/// Runs the scenario from two initial data and tracks `h^d sum |u_a - u_b|`
/// over the active set of every frame.
pub fn l1_contraction_report(scn: &Scenario, u0_a: &Expr, u0_b: &Expr) -> Result<EstimateReport> {
    require_no_source(scn, "the L1 contraction")?;
    let (fa, _) = run_scheme(&scn.with_u0(u0_a.clone()))?;
    let (fb, _) = run_scheme(&scn.with_u0(u0_b.clone()))?;
    Ok(l1_contraction_of(&fa, &fb, scn.grid.cell_volume()))
}

/// L1 contraction check for two fields computed on the same plan.
pub fn l1_contraction_of(fa: &SpaceTimeField, fb: &SpaceTimeField, cell_volume: f64) -> EstimateReport {
    let series: Vec<f64> = (0..fa.len())
        .map(|j| {
            let mask = fa.mask_at(j);
            cell_volume
                * mask
                    .active()
                    .iter()
                    .map(|&i| (fa.frames[j][i] - fb.frames[j][i]).abs())
                    .sum::<f64>()
        })
        .collect();
    let details = series
        .windows(2)
        .enumerate()
        .map(|(j, w)| detail(format!("t = {}", fa.stamps[j + 1].t), w[1], w[0]))
        .collect::<Vec<_>>();
    let nonincreasing = details.iter().all(|d| d.margin >= -EXACT_TOL);
    let mut report = EstimateReport::new(
        "l1_contraction",
        *series.last().unwrap_or(&0.0),
        series.first().copied().unwrap_or(0.0),
        EXACT_TOL,
        details,
    );
    report.series = series;
    report.series_nonincreasing = Some(nonincreasing);
    report
}

/// `int_0^T sum_nodes h^d |a - b|` of two extended fields, each held
/// constant from one time stamp to the next. At a knot the later frame (the
/// next slice's initial state) is used.
pub fn l1_space_time_distance(a: &SpaceTimeField, b: &SpaceTimeField, cell_volume: f64, horizon: f64) -> f64 {
    let mut times: Vec<f64> = a.stamps.iter().chain(&b.stamps).map(|s| s.t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let held = |f: &SpaceTimeField, t: f64| -> usize {
        // last index whose stamp is <= t
        f.stamps.partition_point(|s| s.t <= t).saturating_sub(1)
    };
    let mut total = 0.0;
    for (j, &t) in times.iter().enumerate() {
        let next = times.get(j + 1).copied().unwrap_or(horizon);
        let dt = next - t;
        if dt <= 0.0 {
            continue;
        }
        let (fa, fb) = (&a.extended_frames[held(a, t)], &b.extended_frames[held(b, t)]);
        let diff: f64 = fa.iter().zip(fb).map(|(x, y)| (x - y).abs()).sum();
        total += dt * cell_volume * diff;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementLevel {
    pub n_slices: usize,
    pub delta: f64,
    pub tau: f64,
    /// Slab-to-domain Hausdorff distance.
    pub hausdorff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStudy {
    pub levels: Vec<RefinementLevel>,
    /// `|u~_i - u~_{i+1}|_{L1(Q_T)}` for consecutive levels.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
}

/// Hausdorff distance between the slab union and the space-time domain,
/// sampled at a lattice step of `delta / 32` (in 2D no finer than half the
/// grid spacing, to bound the lattice size).
pub fn slab_hausdorff(scn: &Scenario, knots: &[f64]) -> Result<f64> {
    let delta = crate::geometry::max_gap(knots);
    let mut resolution = delta / 32.0;
    if scn.domain.dim() == 2 {
        resolution = resolution.max(0.5 * scn.grid.min_spacing());
    }
    let slab = SlabSet::new(&scn.domain, knots)?;
    let exact = SpaceTimeSet::new(&scn.domain)?;
    Ok(hausdorff_distance(&slab, &exact, resolution)?)
}

/// Doubles the slice count per level, keeping the substeps per slice, and
/// compares consecutive extended fields in `L1(Q_T)`.
pub fn refinement_study(scn: &Scenario, levels: usize) -> Result<RefinementStudy> {
    if levels < 2 {
        return Err(DiagnosticError::Inapplicable(
            "refinement study needs at least two levels".into(),
        ));
    }
    let run_level = |i: usize| -> Result<(SpaceTimeField, RefinementLevel)> {
        let s = scn.with_slices(scn.n_slices << i);
        let (field, report) = run_scheme(&s)?;
        let hausdorff = slab_hausdorff(scn, &report.knots)?;
        let level = RefinementLevel {
            n_slices: report.n_slices,
            delta: report.delta,
            tau: report.delta / s.substeps as f64,
            hausdorff,
        };
        Ok((field, level))
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<_> = {
        use rayon::prelude::*;
        (0..levels).into_par_iter().map(run_level).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<_> = (0..levels).map(run_level).collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let vol = scn.grid.cell_volume();
    let distances: Vec<f64> = runs
        .windows(2)
        .map(|w| l1_space_time_distance(&w[0].0, &w[1].0, vol, scn.horizon()))
        .collect();
    let ratios = distances.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(RefinementStudy {
        levels: runs.into_iter().map(|r| r.1).collect(),
        distances,
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmsReport {
    pub h: f64,
    pub tau: f64,
    pub final_time: f64,
    pub linf_error: f64,
    pub l1_error: f64,
}

/// Error of the final frame against `exact(T, x)` on the final active set.
pub fn mms_report(scn: &Scenario, exact: &Expr) -> Result<MmsReport> {
    let (field, report) = run_scheme(scn)?;
    mms_errors(&field, scn, exact, report.delta / scn.substeps as f64)
}

fn mms_errors(field: &SpaceTimeField, scn: &Scenario, exact: &Expr, tau: f64) -> Result<MmsReport> {
    let grid = &scn.grid;
    let j = field.len() - 1;
    let t = field.stamps[j].t;
    let (mut linf, mut l1) = (0.0f64, 0.0);
    for &i in field.mask_at(j).active() {
        let err = (field.frames[j][i] - exact.eval(&Vars::at(t, &grid.point(i)))?).abs();
        linf = linf.max(err);
        l1 += err * grid.cell_volume();
    }
    Ok(MmsReport {
        h: grid.min_spacing(),
        tau,
        final_time: t,
        linf_error: linf,
        l1_error: l1,
    })
}

/// `log(e_coarse / e_fine) / log(factor)`.
pub fn observed_order(e_coarse: f64, e_fine: f64, factor: f64) -> f64 {
    (e_coarse / e_fine).ln() / factor.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmsStudy {
    pub runs: Vec<MmsReport>,
    /// Orders of the L-infinity error between consecutive runs, measured
    /// against the ratio of grid spacings (`None` where h is unchanged).
    pub spatial_orders: Vec<Option<f64>>,
    /// Same against the ratio of time steps.
    pub temporal_orders: Vec<Option<f64>>,
}

pub fn mms_study(scenarios: &[Scenario], exact: &Expr) -> Result<MmsStudy> {
    let runs = scenarios
        .iter()
        .map(|s| mms_report(s, exact))
        .collect::<Result<Vec<_>>>()?;
    let order = |a: f64, b: f64, ea: f64, eb: f64| {
        let ratio = a / b;
        ((ratio - 1.0).abs() > 1e-12).then(|| observed_order(ea, eb, ratio))
    };
    let spatial_orders = runs
        .windows(2)
        .map(|w| order(w[0].h, w[1].h, w[0].linf_error, w[1].linf_error))
        .collect();
    let temporal_orders = runs
        .windows(2)
        .map(|w| order(w[0].tau, w[1].tau, w[0].linf_error, w[1].linf_error))
        .collect();
    Ok(MmsStudy {
        runs,
        spatial_orders,
        temporal_orders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::flux::FluxModel;
    use crate::geometry::{Grid, TimeDomain, Track};
    use crate::slice_solver::{BoundaryData, SolverConfig};
    use crate::stitcher::OutputOptions;

    fn e(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    fn scenario(right: &str, u0: &str, psi: &str, horizon: f64) -> Scenario {
        Scenario {
            grid: Grid::uniform_1d(0.0, 2.0, 32).unwrap(),
            domain: TimeDomain::moving_intervals(vec![Track::smooth(e("0"), e(right))], horizon),
            n_slices: 4,
            substeps: 4,
            flux: FluxModel::linear_diffusion(),
            boundary: BoundaryData::new(e(psi)),
            u0: e(u0),
            source: Expr::constant(0.0),
            solver: SolverConfig::default(),
            output: OutputOptions::default(),
        }
    }

    #[test]
    fn constant_scenario_reports() {
        let scn = scenario("1 + t", "2", "2", 0.5);
        let (field, _) = run_scheme(&scn).unwrap();
        let mp = max_principle_report(&field, &scn).unwrap();
        assert_eq!((mp.lhs, mp.rhs), (2.0, 2.0));
        assert!(mp.pass && mp.consistent());
        let en = energy_report(&field, &scn).unwrap();
        assert!(en.pass && en.margin >= 0.0);
        let study = refinement_study(&scn, 2).unwrap();
        assert_eq!(study.distances, vec![0.0]);
    }

    #[test]
    fn injected_spike_fails() {
        let scn = scenario("1", "sin(pi * x)", "0", 0.1);
        let (mut field, _) = run_scheme(&scn).unwrap();
        let i = field.plan.mask(0).active()[3];
        field.frames[5][i] = 1.5;
        let mp = max_principle_report(&field, &scn).unwrap();
        assert!(!mp.pass);
        assert!((mp.margin + 0.5).abs() < 1e-12);
        assert!(mp.consistent());
    }

    #[test]
    fn heat_energy_against_direct_identity() {
        let scn = scenario("1", "sin(pi * x)", "0", 0.1);
        let (field, _) = run_scheme(&scn).unwrap();
        let report = energy_report(&field, &scn).unwrap();
        assert!(report.pass);
        // 1/2 |u+|^2 + tau |grad u+|^2 <= 1/2 |u|^2 step by step
        let h = scn.grid.spacing(0);
        let norm2 = |u: &[f64]| -> f64 {
            field.plan.mask(0).active().iter().map(|&i| u[i] * u[i]).sum::<f64>() * h
        };
        let grad2 = |u: &[f64]| -> f64 {
            (0..u.len() - 1).map(|i| ((u[i + 1] - u[i]) / h).powi(2)).sum::<f64>() * h
        };
        for j in 1..field.len() {
            if field.stamps[j].slice != field.stamps[j - 1].slice {
                continue;
            }
            let tau = field.stamps[j].t - field.stamps[j - 1].t;
            let u = &field.extended_frames[j];
            let lhs = 0.5 * norm2(u) + tau * grad2(u);
            assert!(lhs <= 0.5 * norm2(&field.extended_frames[j - 1]) + 1e-12);
        }
        // and the per-slice numbers agree with the same sums at alpha/2
        for (k, d) in report.details.iter().enumerate() {
            let r = field.slice_range(k);
            let mut lhs = 0.5 * norm2(&field.frames[r.end - 1]);
            for j in r.start + 1..r.end {
                let tau = field.stamps[j].t - field.stamps[j - 1].t;
                lhs += 0.5 * tau * grad2(&field.extended_frames[j]);
            }
            assert!((lhs - d.lhs).abs() < 1e-12 * (1.0 + lhs));
            assert!((0.5 * norm2(&field.frames[r.start]) - d.rhs).abs() < 1e-12);
        }
        let sum: f64 = report.details.iter().map(|d| d.rhs).sum();
        assert_eq!(sum, report.rhs);
    }

    #[test]
    fn energy_holds_for_p3_on_moving_interval() {
        let mut scn = scenario("1 + t", "x * (1 - x)", "0.2 * t * x", 0.5);
        scn.flux = FluxModel::p_laplacian(3.0, 1e-8);
        let (field, _) = run_scheme(&scn).unwrap();
        let report = energy_report(&field, &scn).unwrap();
        assert!(report.pass && worst_slice_margin(&report) > 0.0);
    }

    #[test]
    fn sources_make_reports_inapplicable() {
        let mut scn = scenario("1", "0", "0", 0.1);
        scn.source = e("1");
        let (field, _) = run_scheme(&scn).unwrap();
        assert!(matches!(
            max_principle_report(&field, &scn),
            Err(DiagnosticError::Inapplicable(_))
        ));
        assert!(energy_report(&field, &scn).is_err());
    }

    #[test]
    fn l1_contraction_heat() {
        let scn = scenario("1", "0", "0", 0.1);
        let same = l1_contraction_report(&scn, &e("sin(pi * x)"), &e("sin(pi * x)")).unwrap();
        assert_eq!((same.lhs, same.rhs), (0.0, 0.0));
        let mut fine = scenario("1", "0", "0", 0.1);
        fine.grid = Grid::uniform_1d(0.0, 2.0, 128).unwrap();
        fine.n_slices = 10;
        fine.substeps = 20;
        let r = l1_contraction_report(&fine, &e("sin(pi * x)"), &e("0")).unwrap();
        assert_eq!(r.series_nonincreasing, Some(true));
        let decay = (-std::f64::consts::PI.powi(2) * 0.1).exp();
        assert!((r.lhs / r.rhs - decay).abs() < 5e-3, "{}", r.lhs / r.rhs);
    }

    #[test]
    fn space_time_distance_of_shifted_constants() {
        let a = scenario("1", "1", "1", 0.5);
        let b = scenario("1", "3", "3", 0.5);
        let (fa, _) = run_scheme(&a).unwrap();
        let (fb, _) = run_scheme(&b.with_slices(8)).unwrap();
        let d = l1_space_time_distance(&fa, &fb, a.grid.cell_volume(), 0.5);
        // 33 nodes of weight h, |1 - 3| = 2, over T = 0.5
        assert!((d - 0.5 * 2.0 * 33.0 * a.grid.cell_volume()).abs() < 1e-12);
    }

    #[test]
    fn mms_zero_solution() {
        let scn = scenario("1", "0", "0", 0.1);
        let r = mms_report(&scn, &e("0")).unwrap();
        assert_eq!((r.linf_error, r.l1_error), (0.0, 0.0));
        assert!((observed_order(4.0, 1.0, 2.0) - 2.0).abs() < 1e-15);
    }
}
