//! Frozen-domain solver for one time slice.
//!
//! On slice `k` the mask and the coefficient time `t_k` are fixed and the
//! equation `u_t = div A(t_k, x, u, grad u) + f` is stepped with backward
//! Euler. Each step solves a nonlinear system on the active nodes with a
//! damped Newton iteration; a Kacanov-style Picard iteration takes over if
//! Newton stalls. Ghost nodes carry the Dirichlet data `psi(t, x)`.
//!
//! Space discretization is face based: each grid face between neighbouring
//! nodes carries the normal component of `A`, evaluated at the face midpoint
//! with the one-sided normal difference, the transverse difference averaged
//! from the two endpoints (2D) and `z` the mean of the endpoint values.

mod banded;

use thiserror::Error;

use crate::expr::{Expr, ExprError, Vars};
use crate::flux::{FluxError, FluxModel, Vec2};
use crate::geometry::{DomainMask, Grid, NodeKind};

pub use banded::BandMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("nonlinear solver stalled{}: residual history {residual_history:?}", step_note(*.step))]
    Stall {
        step: Option<usize>,
        residual_history: Vec<f64>,
    },
    #[error("invalid slice problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Flux(#[from] FluxError),
}

fn step_note(step: Option<usize>) -> String {
    step.map(|s| format!(" at substep {s}")).unwrap_or_default()
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Dirichlet data `psi` and its derivatives. Missing derivatives fall back
/// to central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    psi: Expr,
    psi_t: Option<Expr>,
    grad_psi: Option<Vec<Expr>>,
}

const FD_STEP: f64 = 1e-6;

impl BoundaryData {
    pub fn new(psi: Expr) -> Self {
        BoundaryData {
            psi,
            psi_t: None,
            grad_psi: None,
        }
    }

    pub fn with_time_derivative(mut self, psi_t: Expr) -> Self {
        self.psi_t = Some(psi_t);
        self
    }

    pub fn with_gradient(mut self, grad: Vec<Expr>) -> Self {
        self.grad_psi = Some(grad);
        self
    }

    pub fn expr(&self) -> &Expr {
        &self.psi
    }

    pub fn psi(&self, t: f64, x: &[f64]) -> std::result::Result<f64, ExprError> {
        self.psi.eval(&Vars::at(t, x))
    }

    pub fn psi_t(&self, t: f64, x: &[f64]) -> std::result::Result<f64, ExprError> {
        match &self.psi_t {
            Some(e) => e.eval(&Vars::at(t, x)),
            None => {
                let h = FD_STEP * t.abs().max(1.0);
                Ok((self.psi(t + h, x)? - self.psi(t - h, x)?) / (2.0 * h))
            }
        }
    }

    pub fn grad_psi(&self, t: f64, x: &[f64]) -> std::result::Result<Vec2, ExprError> {
        let mut out = [0.0; 2];
        match &self.grad_psi {
            Some(g) => {
                for (a, e) in g.iter().enumerate().take(x.len()) {
                    out[a] = e.eval(&Vars::at(t, x))?;
                }
            }
            None => {
                for a in 0..x.len() {
                    let h = FD_STEP * x[a].abs().max(1.0);
                    let mut p = x.to_vec();
                    let mut m = x.to_vec();
                    p[a] += h;
                    m[a] -= h;
                    out[a] = (self.psi(t, &p)? - self.psi(t, &m)?) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_picard: usize,
    pub line_search_shrink: f64,
    pub min_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-10,
            max_newton: 50,
            max_picard: 200,
            line_search_shrink: 0.5,
            min_step: 2f64.powi(-20),
        }
    }
}

/// Frozen-domain problem on one slice.
#[derive(Debug, Clone)]
pub struct SliceProblem<'a> {
    pub grid: &'a Grid,
    pub mask: &'a DomainMask,
    pub flux: &'a FluxModel,
    pub freeze_time: f64,
    pub span: (f64, f64),
    pub substeps: usize,
    pub boundary: &'a BoundaryData,
    /// Full-grid values; finite on active and ghost nodes.
    pub initial: Vec<f64>,
    pub source: &'a Expr,
    pub solver: SolverConfig,
}

impl SliceProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SolverError::InvalidProblem(m));
        if self.substeps == 0 {
            return fail("substeps must be at least 1".into());
        }
        if !(self.solver.newton_tol > 0.0) {
            return fail("newton_tol must be positive".into());
        }
        if !(self.span.1 > self.span.0) {
            return fail(format!("empty span {:?}", self.span));
        }
        if self.initial.len() != self.grid.node_count() {
            return fail("initial frame does not match the grid".into());
        }
        for &i in self.mask.active() {
            if !self.initial[i].is_finite() {
                return fail(format!("initial value at node {i} is not finite"));
            }
        }
        for &g in self.mask.ghost() {
            let want = self.boundary.psi(self.span.0, &self.grid.point(g))?;
            if self.initial[g] != want {
                return fail(format!(
                    "ghost node {g} holds {} but psi(t_k) = {want}",
                    self.initial[g]
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStats {
    pub newton_iterations: usize,
    pub picard_iterations: usize,
    /// Final residual infinity norm.
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSolution {
    pub times: Vec<f64>,
    /// Full-grid frames; NaN outside active and ghost nodes.
    pub frames: Vec<Vec<f64>>,
    pub newton_iterations: Vec<usize>,
    pub picard_iterations: Vec<usize>,
    pub residual_norms: Vec<f64>,
}

/// Difference quotient of `u` along one axis at a node, for transverse
/// gradients. Central where both neighbours exist.
#[derive(Debug, Clone, Copy)]
struct Tangent {
    plus: usize,
    minus: usize,
    inv_span: f64,
}

#[derive(Debug, Clone)]
struct Face {
    axis: usize,
    lo: usize,
    hi: usize,
    mid: Vec2,
    tangents: Option<[Tangent; 2]>,
}

/// Face-based discretization of `div A(t_freeze, x, u, grad u)` on a mask.
pub struct FluxOperator<'a> {
    grid: &'a Grid,
    mask: &'a DomainMask,
    flux: &'a FluxModel,
    t_freeze: f64,
    faces: Vec<Face>,
    compact: Vec<Option<usize>>,
    /// Non-active nodes read by some face.
    support: Vec<usize>,
}

impl<'a> FluxOperator<'a> {
    pub fn new(grid: &'a Grid, mask: &'a DomainMask, flux: &'a FluxModel, t_freeze: f64) -> Self {
        let dim = grid.dim();
        let mut compact = vec![None; grid.node_count()];
        for (k, &i) in mask.active().iter().enumerate() {
            compact[i] = Some(k);
        }
        let tangent = |node: usize, axis: usize| {
            let plus = grid.step(node, axis, 1);
            let minus = grid.step(node, axis, -1);
            let h = grid.spacing(axis);
            match (plus, minus) {
                (Some(p), Some(m)) => Tangent {
                    plus: p,
                    minus: m,
                    inv_span: 1.0 / (2.0 * h),
                },
                (Some(p), None) => Tangent {
                    plus: p,
                    minus: node,
                    inv_span: 1.0 / h,
                },
                (None, Some(m)) => Tangent {
                    plus: node,
                    minus: m,
                    inv_span: 1.0 / h,
                },
                (None, None) => Tangent {
                    plus: node,
                    minus: node,
                    inv_span: 0.0,
                },
            }
        };
        let mut faces = Vec::new();
        let mut touched = vec![false; grid.node_count()];
        for axis in 0..dim {
            for lo in 0..grid.node_count() {
                let Some(hi) = grid.step(lo, axis, 1) else {
                    continue;
                };
                if !(mask.is_active(lo) || mask.is_active(hi)) {
                    continue;
                }
                let (a, b) = (grid.coords(lo), grid.coords(hi));
                let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                let tangents = (dim == 2).then(|| {
                    let other = 1 - axis;
                    [tangent(lo, other), tangent(hi, other)]
                });
                for n in [lo, hi] {
                    touched[n] = true;
                }
                if let Some(ts) = &tangents {
                    for t in ts {
                        touched[t.plus] = true;
                        touched[t.minus] = true;
                    }
                }
                faces.push(Face {
                    axis,
                    lo,
                    hi,
                    mid,
                    tangents,
                });
            }
        }
        let support = (0..grid.node_count())
            .filter(|&i| touched[i] && !mask.is_active(i))
            .collect();
        FluxOperator {
            grid,
            mask,
            flux,
            t_freeze,
            faces,
            compact,
            support,
        }
    }

    fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Visits every face touching the active set as `(axis, lo, hi)`.
    pub fn for_each_face(&self, mut visit: impl FnMut(usize, usize, usize)) {
        for f in &self.faces {
            visit(f.axis, f.lo, f.hi);
        }
    }

    fn face_state(&self, f: &Face, u: &[f64]) -> (Vec2, f64) {
        let mut xi = [0.0; 2];
        xi[f.axis] = (u[f.hi] - u[f.lo]) / self.grid.spacing(f.axis);
        if let Some([tl, th]) = &f.tangents {
            let g = |t: &Tangent| (u[t.plus] - u[t.minus]) * t.inv_span;
            xi[1 - f.axis] = 0.5 * (g(tl) + g(th));
        }
        (xi, 0.5 * (u[f.lo] + u[f.hi]))
    }

    fn face_flux(&self, f: &Face, u: &[f64]) -> Result<f64> {
        let (xi, z) = self.face_state(f, u);
        let dim = self.dim();
        let a = self
            .flux
            .eval_raw(self.t_freeze, &f.mid[..dim], z, &xi[..dim])?;
        Ok(a[f.axis])
    }

    /// Partial derivatives of the face flux with respect to nodal values.
    fn face_gradient(&self, f: &Face, u: &[f64], out: &mut Vec<(usize, f64)>) -> Result<()> {
        out.clear();
        let dim = self.dim();
        let (xi, z) = self.face_state(f, u);
        let x = &f.mid[..dim];
        let jac = self.flux.jacobian_xi(self.t_freeze, x, z, &xi[..dim])?;
        let dz = self.flux.derivative_z(self.t_freeze, x, z, &xi[..dim])?;
        let a = f.axis;
        let h = self.grid.spacing(a);
        out.push((f.lo, -jac[a][a] / h + 0.5 * dz[a]));
        out.push((f.hi, jac[a][a] / h + 0.5 * dz[a]));
        if let Some(ts) = &f.tangents {
            let cross = jac[a][1 - a];
            if cross != 0.0 {
                for t in ts {
                    out.push((t.plus, 0.5 * cross * t.inv_span));
                    out.push((t.minus, -0.5 * cross * t.inv_span));
                }
            }
        }
        Ok(())
    }

    /// Divergence on active nodes, in `mask.active()` order.
    pub fn divergence(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut div = vec![0.0; self.mask.active().len()];
        for f in &self.faces {
            let flux = self.face_flux(f, u)? / self.grid.spacing(f.axis);
            if let Some(k) = self.compact[f.lo] {
                div[k] += flux;
            }
            if let Some(k) = self.compact[f.hi] {
                div[k] -= flux;
            }
        }
        Ok(div)
    }
}

/// `div_h A(t_freeze, x, u, grad_h u)` on the active nodes of `mask`, in
/// `mask.active()` order. `frame` must be finite on every node the stencil
/// reads: active and ghost nodes, and in 2D the transverse neighbours of
/// ghost nodes.
pub fn discrete_flux_divergence(
    grid: &Grid,
    mask: &DomainMask,
    flux: &FluxModel,
    t_freeze: f64,
    frame: &[f64],
) -> Result<Vec<f64>> {
    FluxOperator::new(grid, mask, flux, t_freeze).divergence(frame)
}

struct Stepper<'p, 'a> {
    problem: &'p SliceProblem<'a>,
    op: FluxOperator<'a>,
    band: (usize, usize),
}

impl<'p, 'a> Stepper<'p, 'a> {
    fn new(problem: &'p SliceProblem<'a>) -> Self {
        let op = FluxOperator::new(
            problem.grid,
            problem.mask,
            problem.flux,
            problem.freeze_time,
        );
        // Bandwidth from the widest possible face stencil.
        let mut kl = 0usize;
        for f in &op.faces {
            let mut nodes = vec![f.lo, f.hi];
            if let Some(ts) = &f.tangents {
                for t in ts {
                    nodes.push(t.plus);
                    nodes.push(t.minus);
                }
            }
            let rows: Vec<usize> = [f.lo, f.hi].iter().filter_map(|&n| op.compact[n]).collect();
            for &r in &rows {
                for &n in &nodes {
                    if let Some(c) = op.compact[n] {
                        kl = kl.max(r.abs_diff(c));
                    }
                }
            }
        }
        Stepper {
            problem,
            op,
            band: (kl, kl),
        }
    }

    fn active(&self) -> &[usize] {
        self.problem.mask.active()
    }

    /// Working array at `t_to`: `guess` on active nodes, `psi` on support.
    fn working_array(&self, guess: &[f64], t_to: f64) -> Result<Vec<f64>> {
        let grid = self.problem.grid;
        let mut u = vec![f64::NAN; grid.node_count()];
        for &i in self.active() {
            u[i] = guess[i];
        }
        for &i in &self.op.support {
            u[i] = self.problem.boundary.psi(t_to, &grid.point(i))?;
        }
        Ok(u)
    }

    fn source_values(&self, t_to: f64) -> Result<Vec<f64>> {
        let grid = self.problem.grid;
        if self.problem.source.is_zero_literal() {
            return Ok(vec![0.0; self.active().len()]);
        }
        self.active()
            .iter()
            .map(|&i| Ok(self.problem.source.eval(&Vars::at(t_to, &grid.point(i)))?))
            .collect()
    }

    fn residual(&self, u: &[f64], u_in: &[f64], src: &[f64], tau: f64) -> Result<Vec<f64>> {
        let div = self.op.divergence(u)?;
        Ok(self
            .active()
            .iter()
            .enumerate()
            .map(|(k, &i)| u[i] - u_in[i] - tau * (div[k] + src[k]))
            .collect())
    }

    fn jacobian(&self, u: &[f64], tau: f64) -> Result<BandMatrix> {
        let n = self.active().len();
        let (kl, ku) = self.band;
        let mut m = BandMatrix::zeros(n, kl, ku);
        for k in 0..n {
            m.add(k, k, 1.0);
        }
        let mut grad = Vec::with_capacity(6);
        for f in &self.op.faces {
            self.op.face_gradient(f, u, &mut grad)?;
            let h = self.problem.grid.spacing(f.axis);
            for &(node, d) in &grad {
                let Some(c) = self.op.compact[node] else {
                    continue;
                };
                if let Some(r) = self.op.compact[f.lo] {
                    m.add(r, c, -tau * d / h);
                }
                if let Some(r) = self.op.compact[f.hi] {
                    m.add(r, c, tau * d / h);
                }
            }
        }
        Ok(m)
    }

    /// Linear system of one Picard sweep: face fluxes frozen as
    /// `k_f * (u_hi - u_lo) / h` with `k_f` from the current iterate.
    fn picard_system(&self, u: &[f64], u_in: &[f64], src: &[f64], tau: f64) -> Result<(BandMatrix, Vec<f64>)> {
        let n = self.active().len();
        let (kl, ku) = self.band;
        let mut m = BandMatrix::zeros(n, kl, ku);
        let mut rhs: Vec<f64> = self
            .active()
            .iter()
            .enumerate()
            .map(|(k, &i)| u_in[i] + tau * src[k])
            .collect();
        for k in 0..n {
            m.add(k, k, 1.0);
        }
        let dim = self.op.dim();
        for f in &self.op.faces {
            let h = self.problem.grid.spacing(f.axis);
            let (xi, z) = self.op.face_state(f, u);
            let flux = self.op.face_flux(f, u)?;
            let normal = xi[f.axis];
            let mut k = if normal.abs() > 1e-300 { flux / normal } else { f64::NAN };
            if !(k.is_finite() && k >= 0.0) {
                let jac = self
                    .problem
                    .flux
                    .jacobian_xi(self.problem.freeze_time, &f.mid[..dim], z, &xi[..dim])?;
                k = jac[f.axis][f.axis].max(0.0);
            }
            let w = tau * k / (h * h);
            let (lo, hi) = (self.op.compact[f.lo], self.op.compact[f.hi]);
            match (lo, hi) {
                (Some(a), Some(b)) => {
                    m.add(a, a, w);
                    m.add(a, b, -w);
                    m.add(b, b, w);
                    m.add(b, a, -w);
                }
                (Some(a), None) => {
                    m.add(a, a, w);
                    rhs[a] += w * u[f.hi];
                }
                (None, Some(b)) => {
                    m.add(b, b, w);
                    rhs[b] += w * u[f.lo];
                }
                (None, None) => {}
            }
        }
        Ok((m, rhs))
    }

    fn step(&self, frame_in: &[f64], t_from: f64, t_to: f64) -> Result<(Vec<f64>, StepStats)> {
        let cfg = &self.problem.solver;
        let tau = t_to - t_from;
        let src = self.source_values(t_to)?;
        let mut u = self.working_array(frame_in, t_to)?;
        let active: Vec<usize> = self.active().to_vec();
        let inf = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let two = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();

        let mut stats = StepStats::default();
        let mut res = self.residual(&u, frame_in, &src, tau)?;
        stats.residual_history.push(inf(&res));
        let mut converged = false;

        // Damped Newton; at least one update so linear problems report one iteration.
        while stats.newton_iterations < cfg.max_newton {
            let jac = self.jacobian(&u, tau)?;
            let neg: Vec<f64> = res.iter().map(|v| -v).collect();
            let Some(delta) = jac.solve(neg) else { break };
            if delta.iter().any(|d| !d.is_finite()) {
                break;
            }
            let base = two(&res);
            let mut lambda = 1.0;
            let mut accepted = None;
            while lambda >= cfg.min_step {
                let mut trial = u.clone();
                for (k, &i) in active.iter().enumerate() {
                    trial[i] += lambda * delta[k];
                }
                let r = self.residual(&trial, frame_in, &src, tau)?;
                if inf(&r) <= cfg.newton_tol || two(&r) < base {
                    accepted = Some((trial, r));
                    break;
                }
                lambda *= cfg.line_search_shrink;
            }
            let Some((trial, r)) = accepted else { break };
            u = trial;
            res = r;
            stats.newton_iterations += 1;
            stats.residual_history.push(inf(&res));
            if inf(&res) <= cfg.newton_tol {
                converged = true;
                break;
            }
        }

        while !converged && stats.picard_iterations < cfg.max_picard {
            let (m, rhs) = self.picard_system(&u, frame_in, &src, tau)?;
            let Some(sol) = m.solve(rhs) else { break };
            for (k, &i) in active.iter().enumerate() {
                u[i] = sol[k];
            }
            res = self.residual(&u, frame_in, &src, tau)?;
            stats.picard_iterations += 1;
            stats.residual_history.push(inf(&res));
            converged = inf(&res) <= cfg.newton_tol;
        }

        if !converged {
            return Err(SolverError::Stall {
                step: None,
                residual_history: stats.residual_history,
            });
        }
        stats.residual = inf(&res);
        Ok((self.output_frame(&u, t_to)?, stats))
    }

    fn output_frame(&self, u: &[f64], t: f64) -> Result<Vec<f64>> {
        let grid = self.problem.grid;
        let mut out = vec![f64::NAN; grid.node_count()];
        for &i in self.active() {
            out[i] = u[i];
        }
        for &g in self.problem.mask.ghost() {
            out[g] = self.problem.boundary.psi(t, &grid.point(g))?;
        }
        Ok(out)
    }
}

/// One backward Euler step from `t_from` to `t_to` within the slice.
pub fn implicit_step(
    problem: &SliceProblem,
    frame_in: &[f64],
    t_from: f64,
    t_to: f64,
) -> Result<(Vec<f64>, StepStats)> {
    if !(t_from < t_to) {
        return Err(SolverError::InvalidProblem(format!(
            "step needs t_from < t_to, got {t_from} >= {t_to}"
        )));
    }
    Stepper::new(problem).step(frame_in, t_from, t_to)
}

/// Residual infinity norm of a completed step, recomputed from
/// [`discrete_flux_divergence`].
pub fn step_residual(
    problem: &SliceProblem,
    frame_in: &[f64],
    frame_out: &[f64],
    t_from: f64,
    t_to: f64,
) -> Result<f64> {
    let grid = problem.grid;
    let mut u = frame_out.to_vec();
    let op = FluxOperator::new(grid, problem.mask, problem.flux, problem.freeze_time);
    for &i in &op.support {
        u[i] = problem.boundary.psi(t_to, &grid.point(i))?;
    }
    let div = op.divergence(&u)?;
    let tau = t_to - t_from;
    let mut worst = 0.0f64;
    for (k, &i) in problem.mask.active().iter().enumerate() {
        let f = problem.source.eval(&Vars::at(t_to, &grid.point(i)))?;
        worst = worst.max((u[i] - frame_in[i] - tau * (div[k] + f)).abs());
    }
    Ok(worst)
}

/// Integrates the slice with `substeps` uniform backward Euler steps.
pub fn solve_slice(problem: &SliceProblem) -> Result<SliceSolution> {
    problem.validate()?;
    let stepper = Stepper::new(problem);
    let (t0, t1) = problem.span;
    let n = problem.substeps;
    let mut times = Vec::with_capacity(n + 1);
    times.push(t0);
    for j in 1..n {
        times.push(t0 + (t1 - t0) * j as f64 / n as f64);
    }
    times.push(t1);

    let mut initial = problem.initial.clone();
    for (i, kind) in problem.mask.kinds().iter().enumerate() {
        if *kind == NodeKind::Outside {
            initial[i] = f64::NAN;
        }
    }
    let mut sol = SliceSolution {
        times: times.clone(),
        frames: vec![initial],
        newton_iterations: Vec::with_capacity(n),
        picard_iterations: Vec::with_capacity(n),
        residual_norms: Vec::with_capacity(n),
    };
    for j in 0..n {
        let prev = sol.frames.last().expect("initial frame");
        let (next, stats) = stepper
            .step(prev, times[j], times[j + 1])
            .map_err(|e| match e {
                SolverError::Stall {
                    residual_history, ..
                } => SolverError::Stall {
                    step: Some(j),
                    residual_history,
                },
                other => other,
            })?;
        sol.frames.push(next);
        sol.newton_iterations.push(stats.newton_iterations);
        sol.picard_iterations.push(stats.picard_iterations);
        sol.residual_norms.push(stats.residual);
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::geometry::{rasterize, Region};
    use std::f64::consts::PI;

    fn e(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    struct Setup {
        grid: Grid,
        mask: DomainMask,
    }

    fn unit_interval(cells: usize) -> Setup {
        // nodes at j / cells on [-2/cells, 1 + 2/cells]
        let h = 1.0 / cells as f64;
        let grid = Grid::new(&[-2.0 * h], &[h], &[cells + 4]).unwrap();
        let mask = rasterize(&Region::intervals(vec![(0.0, 1.0)]), &grid).unwrap();
        Setup { grid, mask }
    }

    fn frame_from(grid: &Grid, mask: &DomainMask, f: impl Fn(f64) -> f64, psi: f64) -> Vec<f64> {
        (0..grid.node_count())
            .map(|i| match mask.kind(i) {
                NodeKind::Active => f(grid.coords(i)[0]),
                NodeKind::Ghost => psi,
                NodeKind::Outside => f64::NAN,
            })
            .collect()
    }

    #[test]
    fn second_difference_of_a_spike() {
        let h = 0.25;
        let grid = Grid::new(&[0.0], &[h], &[4]).unwrap();
        let mask = rasterize(&Region::intervals(vec![(0.25, 0.75)]), &grid).unwrap();
        assert_eq!(mask.active(), &[2]);
        let frame = vec![f64::NAN, 0.0, 1.0, 0.0, f64::NAN];
        let div =
            discrete_flux_divergence(&grid, &mask, &FluxModel::linear_diffusion(), 0.0, &frame)
                .unwrap();
        assert_eq!(div, vec![-2.0 / (h * h)]);
    }

    #[test]
    fn constants_and_affine_data_have_zero_divergence() {
        let s = unit_interval(16);
        for flux in [
            FluxModel::linear_diffusion(),
            FluxModel::p_laplacian(3.0, 1e-8),
            FluxModel::z_modulated(1.5, 1e-8),
        ] {
            let frame = frame_from(&s.grid, &s.mask, |_| 2.5, 2.5);
            let div = discrete_flux_divergence(&s.grid, &s.mask, &flux, 0.0, &frame).unwrap();
            assert!(div.iter().all(|&d| d == 0.0));
        }
        let affine: Vec<f64> = (0..s.grid.node_count())
            .map(|i| 0.3 * s.grid.coords(i)[0] - 1.0)
            .collect();
        let div =
            discrete_flux_divergence(&s.grid, &s.mask, &FluxModel::linear_diffusion(), 0.0, &affine)
                .unwrap();
        assert!(div.iter().all(|d| d.abs() < 1e-12));
    }

    fn problem<'a>(
        s: &'a Setup,
        flux: &'a FluxModel,
        boundary: &'a BoundaryData,
        source: &'a Expr,
        initial: Vec<f64>,
        span: (f64, f64),
        substeps: usize,
    ) -> SliceProblem<'a> {
        SliceProblem {
            grid: &s.grid,
            mask: &s.mask,
            flux,
            freeze_time: span.0,
            span,
            substeps,
            boundary,
            initial,
            source,
            solver: SolverConfig::default(),
        }
    }

    #[test]
    fn constant_state_is_a_fixed_point() {
        let s = unit_interval(8);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(Expr::constant(1.75));
        for flux in [
            FluxModel::linear_diffusion(),
            FluxModel::p_laplacian(1.5, 1e-8),
            FluxModel::p_laplacian(3.0, 1e-8),
            FluxModel::z_modulated(2.0, 1e-8),
        ] {
            let init = frame_from(&s.grid, &s.mask, |_| 1.75, 1.75);
            let p = problem(&s, &flux, &bd, &zero, init, (0.0, 0.1), 3);
            let (out, stats) = implicit_step(&p, &p.initial, 0.0, 0.05).unwrap();
            assert_eq!(stats.newton_iterations, 1);
            for &i in s.mask.active() {
                assert_eq!(out[i], 1.75);
            }
            let sol = solve_slice(&p).unwrap();
            for f in &sol.frames {
                for &i in s.mask.active() {
                    assert_eq!(f[i], 1.75);
                }
            }
        }
    }

    /// Thomas algorithm for `(I - tau L_h) u = rhs` with zero Dirichlet data.
    fn heat_oracle(u_in: &[f64], h: f64, tau: f64) -> Vec<f64> {
        let n = u_in.len();
        let r = tau / (h * h);
        let (a, b, c) = (-r, 1.0 + 2.0 * r, -r);
        let mut cp = vec![0.0; n];
        let mut dp = vec![0.0; n];
        cp[0] = c / b;
        dp[0] = u_in[0] / b;
        for i in 1..n {
            let m = b - a * cp[i - 1];
            cp[i] = c / m;
            dp[i] = (u_in[i] - a * dp[i - 1]) / m;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = dp[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = dp[i] - cp[i] * x[i + 1];
        }
        x
    }

    #[test]
    fn heat_step_matches_tridiagonal_solve() {
        let s = unit_interval(4);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(Expr::constant(0.0));
        let flux = FluxModel::linear_diffusion();
        let init = frame_from(&s.grid, &s.mask, |x| (PI * x).sin(), 0.0);
        let p = problem(&s, &flux, &bd, &zero, init.clone(), (0.0, 0.02), 2);
        let (out, stats) = implicit_step(&p, &init, 0.0, 0.01).unwrap();
        assert_eq!(stats.newton_iterations, 1);
        let u_in: Vec<f64> = s.mask.active().iter().map(|&i| init[i]).collect();
        assert_eq!(u_in.len(), 3);
        let want = heat_oracle(&u_in, 0.25, 0.01);
        for (k, &i) in s.mask.active().iter().enumerate() {
            assert!((out[i] - want[k]).abs() < 1e-14);
        }

        let sol = solve_slice(&p).unwrap();
        let second = heat_oracle(&want, 0.25, 0.01);
        for (k, &i) in s.mask.active().iter().enumerate() {
            assert!((sol.frames[2][i] - second[k]).abs() < 1e-14);
        }
        assert_eq!(sol.newton_iterations, vec![1, 1]);
    }

    #[test]
    fn single_substep_equals_one_step() {
        let s = unit_interval(16);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(Expr::constant(0.0));
        let flux = FluxModel::p_laplacian(3.0, 1e-8);
        let init = frame_from(&s.grid, &s.mask, |x| (PI * x).sin(), 0.0);
        let p = problem(&s, &flux, &bd, &zero, init.clone(), (0.2, 0.3), 1);
        let sol = solve_slice(&p).unwrap();
        let (out, _) = implicit_step(&p, &init, 0.2, 0.3).unwrap();
        assert_eq!(sol.frames[1].len(), out.len());
        for (a, b) in sol.frames[1].iter().zip(&out) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn zero_is_a_fixed_point_for_p3() {
        let s = unit_interval(16);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(Expr::constant(0.0));
        let flux = FluxModel::p_laplacian(3.0, 0.0);
        let init = frame_from(&s.grid, &s.mask, |_| 0.0, 0.0);
        let p = problem(&s, &flux, &bd, &zero, init.clone(), (0.0, 0.1), 1);
        let (out, _) = implicit_step(&p, &init, 0.0, 0.1).unwrap();
        assert!(s.mask.active().iter().all(|&i| out[i] == 0.0));
    }

    #[test]
    fn nonlinear_steps_respect_max_principle_and_certificate() {
        let s = unit_interval(32);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(e("0.2 * sin(3 * t) + 0.1 * x"));
        for flux in [
            FluxModel::p_laplacian(1.5, 1e-8),
            FluxModel::p_laplacian(3.0, 1e-8),
            FluxModel::z_modulated(2.5, 1e-8),
        ] {
            let init = {
                let mut f = frame_from(&s.grid, &s.mask, |x| (2.0 * PI * x).sin(), 0.0);
                for &g in s.mask.ghost() {
                    f[g] = bd.psi(0.0, &s.grid.point(g)).unwrap();
                }
                f
            };
            let p = problem(&s, &flux, &bd, &zero, init, (0.0, 0.05), 5);
            let sol = solve_slice(&p).unwrap();
            for j in 0..5 {
                let (t0, t1) = (sol.times[j], sol.times[j + 1]);
                let (fi, fo) = (&sol.frames[j], &sol.frames[j + 1]);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &i in s.mask.active() {
                    lo = lo.min(fi[i]);
                    hi = hi.max(fi[i]);
                }
                for &g in s.mask.ghost() {
                    for t in [t0, t1] {
                        let v = bd.psi(t, &s.grid.point(g)).unwrap();
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                for &i in s.mask.active() {
                    assert!(fo[i] >= lo - 1e-10 && fo[i] <= hi + 1e-10);
                }
                let r = step_residual(&p, fi, fo, t0, t1).unwrap();
                assert!(r <= p.solver.newton_tol, "{:?}: residual {r}", flux.kind());
            }
        }
    }

    #[test]
    fn l1_contraction_per_step() {
        let s = unit_interval(32);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(Expr::constant(0.0));
        for flux in [FluxModel::p_laplacian(1.5, 1e-8), FluxModel::p_laplacian(4.0, 1e-8)] {
            let a = frame_from(&s.grid, &s.mask, |x| (PI * x).sin(), 0.0);
            let b = frame_from(&s.grid, &s.mask, |x| 0.5 * (3.0 * PI * x).sin().abs(), 0.0);
            let pa = problem(&s, &flux, &bd, &zero, a.clone(), (0.0, 0.01), 1);
            let (oa, _) = implicit_step(&pa, &a, 0.0, 0.01).unwrap();
            let (ob, _) = implicit_step(&pa, &b, 0.0, 0.01).unwrap();
            let l1 = |u: &[f64], v: &[f64]| -> f64 {
                s.mask.active().iter().map(|&i| (u[i] - v[i]).abs()).sum()
            };
            assert!(l1(&oa, &ob) <= l1(&a, &b) + 1e-10);
        }
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let s = unit_interval(8);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(Expr::constant(1.0));
        let flux = FluxModel::linear_diffusion();
        let init = frame_from(&s.grid, &s.mask, |_| 0.0, 0.0);
        let p = problem(&s, &flux, &bd, &zero, init, (0.0, 0.1), 1);
        assert!(matches!(solve_slice(&p), Err(SolverError::InvalidProblem(_))));
        let init = frame_from(&s.grid, &s.mask, |_| 0.0, 1.0);
        let mut p = problem(&s, &flux, &bd, &zero, init, (0.0, 0.1), 0);
        assert!(solve_slice(&p).is_err());
        p.substeps = 1;
        assert!(implicit_step(&p, &p.initial.clone(), 0.1, 0.1).is_err());
    }

    #[test]
    fn stall_carries_residual_history() {
        let s = unit_interval(8);
        let zero = Expr::constant(0.0);
        let bd = BoundaryData::new(Expr::constant(0.0));
        let flux = FluxModel::p_laplacian(3.0, 1e-8);
        let init = frame_from(&s.grid, &s.mask, |x| (PI * x).sin(), 0.0);
        let mut p = problem(&s, &flux, &bd, &zero, init.clone(), (0.0, 0.1), 1);
        p.solver.max_newton = 0;
        p.solver.max_picard = 1;
        match implicit_step(&p, &init, 0.0, 0.1) {
            Err(SolverError::Stall { residual_history, .. }) => {
                assert_eq!(residual_history.len(), 2)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn boundary_derivatives_fall_back_to_differences() {
        let bd = BoundaryData::new(e("t^2 * x + y"));
        let pt = bd.psi_t(0.5, &[2.0, 1.0]).unwrap();
        assert!((pt - 2.0).abs() < 1e-8);
        let g = bd.grad_psi(0.5, &[2.0, 1.0]).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-8 && (g[1] - 1.0).abs() < 1e-8);
        let analytic = BoundaryData::new(e("t^2 * x"))
            .with_time_derivative(e("2 * t * x"))
            .with_gradient(vec![e("t^2")]);
        assert_eq!(analytic.psi_t(0.5, &[2.0]).unwrap(), 2.0);
        assert_eq!(analytic.grad_psi(0.5, &[2.0]).unwrap()[0], 0.25);
    }
}
