//! Leray-Lions flux fields `A(t, x, z, xi)` and sampled checks of their
//! structural conditions.
//!
//! Builtins are radial in `xi`:
//!
//! ```text
//! A = m(z) (|xi|^2 + eps^2)^((p-2)/2) xi
//! ```
//!
//! with `m = 1` for the p-Laplacian and `m(z) = 1 + sin(z)^2 / 2` for the
//! z-modulated flux. Their structural constants are derived from `p` and
//! `eps_reg`; with `eps_reg = 0` they are `c = alpha = 1`, `b = d = 0`
//! (times `max m = 3/2` in the growth bound for the modulated kind).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, ExprError, Vars};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluxError {
    #[error("non-finite flux input: {0}")]
    NumericInput(String),
    #[error("flux Jacobian is singular at |xi| = {norm:.3e} (p = {p} < 2 needs eps_reg > 0)")]
    Singular { p: f64, norm: f64 },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

pub type Result<T> = std::result::Result<T, FluxError>;

/// Small vector in `R^dim`, `dim <= 2`; unused trailing entries are zero.
pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub enum FluxKind {
    PLaplacian,
    LinearDiffusion,
    ZModulated,
    /// Component expressions `a1, a2` in `t, x, y, z, xi1, xi2`.
    Custom(Vec<Expr>),
}

impl FluxKind {
    pub fn name(&self) -> &'static str {
        match self {
            FluxKind::PLaplacian => "p_laplacian",
            FluxKind::LinearDiffusion => "linear_diffusion",
            FluxKind::ZModulated => "z_modulated",
            FluxKind::Custom(_) => "custom",
        }
    }
}

/// Structural constants of the growth, coercivity and continuity bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureConstants {
    pub growth_c: f64,
    pub coercivity_alpha: f64,
    pub lower_b: f64,
    pub lower_d: f64,
    pub z_lipschitz: f64,
    pub time_modulus: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluxModel {
    kind: FluxKind,
    p: f64,
    eps_reg: f64,
    constants: StructureConstants,
}

pub const DEFAULT_EPS_REG: f64 = 1e-8;

/// Modulation of the z-dependent builtin.
fn modulation(z: f64) -> f64 {
    1.0 + 0.5 * z.sin().powi(2)
}

fn modulation_dz(z: f64) -> f64 {
    z.sin() * z.cos()
}

fn builtin_constants(p: f64, eps: f64, m_max: f64) -> StructureConstants {
    let (mut c, mut b, mut d) = (1.0, 0.0, 0.0);
    if eps > 0.0 && p < 2.0 {
        // s^{p/2} - s (s + eps^2)^{(p-2)/2} <= eps^p
        d = eps.powf(p);
    } else if eps > 0.0 && p > 2.0 {
        // (s + eps^2)^{(p-2)/2} <= k (|xi|^{p-2} + eps^{p-2}) and |xi| <= 1 + |xi|^{p-1}
        let k = 2f64.powf((p - 4.0) / 2.0).max(1.0);
        c = k * (1.0 + eps.powf(p - 2.0));
        b = k * eps.powf(p - 2.0);
    }
    StructureConstants {
        growth_c: m_max * c,
        coercivity_alpha: 1.0,
        lower_b: m_max * b,
        lower_d: d,
        z_lipschitz: if m_max > 1.0 { 1.0 } else { 0.0 },
        time_modulus: Expr::constant(0.0),
    }
}

impl FluxModel {
    pub fn p_laplacian(p: f64, eps_reg: f64) -> Self {
        FluxModel {
            kind: FluxKind::PLaplacian,
            p,
            eps_reg,
            constants: builtin_constants(p, eps_reg, 1.0),
        }
    }

    pub fn linear_diffusion() -> Self {
        FluxModel {
            kind: FluxKind::LinearDiffusion,
            p: 2.0,
            eps_reg: 0.0,
            constants: builtin_constants(2.0, 0.0, 1.0),
        }
    }

    pub fn z_modulated(p: f64, eps_reg: f64) -> Self {
        FluxModel {
            kind: FluxKind::ZModulated,
            p,
            eps_reg,
            constants: builtin_constants(p, eps_reg, 1.5),
        }
    }

    pub fn custom(components: Vec<Expr>, p: f64, constants: StructureConstants) -> Self {
        FluxModel {
            kind: FluxKind::Custom(components),
            p,
            eps_reg: 0.0,
            constants,
        }
    }

    pub fn kind(&self) -> &FluxKind {
        &self.kind
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Conjugate exponent `p / (p - 1)`.
    pub fn p_conjugate(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    pub fn eps_reg(&self) -> f64 {
        self.eps_reg
    }

    pub fn constants(&self) -> &StructureConstants {
        &self.constants
    }

    pub fn is_builtin(&self) -> bool {
        !matches!(self.kind, FluxKind::Custom(_))
    }

    /// Whether the flux ignores `z`.
    pub fn is_z_independent(&self) -> bool {
        match &self.kind {
            FluxKind::PLaplacian | FluxKind::LinearDiffusion => true,
            FluxKind::ZModulated => false,
            FluxKind::Custom(c) => !c.iter().any(|e| e.mentions(crate::expr::Var::Z)),
        }
    }

    /// Every violated parameter invariant.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let k = &self.constants;
        if !(self.p > 1.0 && self.p.is_finite()) {
            out.push(format!("p must exceed 1 (1 < p < inf), got {}", self.p));
        }
        if !(self.eps_reg >= 0.0 && self.eps_reg.is_finite()) {
            out.push(format!("eps_reg must be nonnegative, got {}", self.eps_reg));
        }
        if !(k.coercivity_alpha > 0.0) {
            out.push(format!("alpha must be positive, got {}", k.coercivity_alpha));
        }
        if !(k.growth_c > 0.0) {
            out.push(format!("c must be positive, got {}", k.growth_c));
        }
        for (name, v) in [("b", k.lower_b), ("d", k.lower_d), ("C_z", k.z_lipschitz)] {
            if !(v >= 0.0) {
                out.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if let FluxKind::Custom(c) = &self.kind {
            if c.is_empty() || c.len() > 2 {
                out.push("custom flux needs one component per space dimension".into());
            }
        }
        out
    }

    fn radial_weight(&self, s: f64) -> f64 {
        if self.p == 2.0 {
            1.0
        } else {
            (s + self.eps_reg * self.eps_reg).powf((self.p - 2.0) / 2.0)
        }
    }

    /// Unchecked evaluation for inner loops.
    pub fn eval_raw(&self, t: f64, x: &[f64], z: f64, xi: &[f64]) -> Result<Vec2> {
        let dim = xi.len();
        let mut out = [0.0; 2];
        match &self.kind {
            FluxKind::LinearDiffusion => out[..dim].copy_from_slice(xi),
            FluxKind::PLaplacian | FluxKind::ZModulated => {
                let s: f64 = xi.iter().map(|v| v * v).sum();
                let mut w = if s == 0.0 && self.eps_reg == 0.0 {
                    0.0
                } else {
                    self.radial_weight(s)
                };
                if matches!(self.kind, FluxKind::ZModulated) {
                    w *= modulation(z);
                }
                for a in 0..dim {
                    out[a] = w * xi[a];
                }
            }
            FluxKind::Custom(components) => {
                let mut v = Vars::at(t, x);
                v.z = z;
                v.xi1 = xi[0];
                v.xi2 = xi.get(1).copied().unwrap_or(0.0);
                for (a, c) in components.iter().enumerate().take(dim) {
                    out[a] = c.eval(&v)?;
                }
            }
        }
        Ok(out)
    }

    /// `A(t, x, z, xi)`; errors on non-finite inputs.
    pub fn evaluate(&self, t: f64, x: &[f64], z: f64, xi: &[f64]) -> Result<Vec2> {
        let all = std::iter::once(t).chain(x.iter().copied()).chain([z]).chain(xi.iter().copied());
        for v in all {
            if !v.is_finite() {
                return Err(FluxError::NumericInput(format!(
                    "t = {t}, x = {x:?}, z = {z}, xi = {xi:?}"
                )));
            }
        }
        self.eval_raw(t, x, z, xi)
    }

    /// `dA / dxi` as a `dim x dim` row-major matrix.
    pub fn jacobian_xi(&self, t: f64, x: &[f64], z: f64, xi: &[f64]) -> Result<[[f64; 2]; 2]> {
        let dim = xi.len();
        let mut jac = [[0.0; 2]; 2];
        match &self.kind {
            FluxKind::LinearDiffusion => {
                for (a, row) in jac.iter_mut().enumerate().take(dim) {
                    row[a] = 1.0;
                }
            }
            FluxKind::PLaplacian | FluxKind::ZModulated => {
                let s: f64 = xi.iter().map(|v| v * v).sum();
                let p = self.p;
                if p < 2.0 && self.eps_reg == 0.0 && s < 1e-300 {
                    return Err(FluxError::Singular { p, norm: s.sqrt() });
                }
                let m = if matches!(self.kind, FluxKind::ZModulated) {
                    modulation(z)
                } else {
                    1.0
                };
                if p == 2.0 {
                    for (a, row) in jac.iter_mut().enumerate().take(dim) {
                        row[a] = m;
                    }
                } else {
                    let base = s + self.eps_reg * self.eps_reg;
                    let w = if base == 0.0 { 0.0 } else { base.powf((p - 2.0) / 2.0) };
                    let w2 = if base == 0.0 {
                        0.0
                    } else {
                        (p - 2.0) * base.powf((p - 4.0) / 2.0)
                    };
                    for a in 0..dim {
                        for b in 0..dim {
                            let delta = if a == b { w } else { 0.0 };
                            jac[a][b] = m * (delta + w2 * xi[a] * xi[b]);
                        }
                    }
                }
            }
            FluxKind::Custom(_) => {
                for b in 0..dim {
                    let h = 1e-6 * xi[b].abs().max(1.0);
                    let mut plus = [0.0; 2];
                    let mut minus = [0.0; 2];
                    plus[..dim].copy_from_slice(xi);
                    minus[..dim].copy_from_slice(xi);
                    plus[b] += h;
                    minus[b] -= h;
                    let fp = self.eval_raw(t, x, z, &plus[..dim])?;
                    let fm = self.eval_raw(t, x, z, &minus[..dim])?;
                    for a in 0..dim {
                        jac[a][b] = (fp[a] - fm[a]) / (2.0 * h);
                    }
                }
            }
        }
        Ok(jac)
    }

    /// `dA / dz`.
    pub fn derivative_z(&self, t: f64, x: &[f64], z: f64, xi: &[f64]) -> Result<Vec2> {
        let dim = xi.len();
        match &self.kind {
            FluxKind::LinearDiffusion | FluxKind::PLaplacian => Ok([0.0; 2]),
            FluxKind::ZModulated => {
                let base = self.eval_raw(t, x, 0.0, xi)?;
                let dm = modulation_dz(z);
                Ok([dm * base[0], dm * base[1]])
            }
            FluxKind::Custom(_) => {
                if self.is_z_independent() {
                    return Ok([0.0; 2]);
                }
                let h = 1e-6 * z.abs().max(1.0);
                let fp = self.eval_raw(t, x, z + h, xi)?;
                let fm = self.eval_raw(t, x, z - h, xi)?;
                let mut out = [0.0; 2];
                for a in 0..dim {
                    out[a] = (fp[a] - fm[a]) / (2.0 * h);
                }
                Ok(out)
            }
        }
    }

    fn modulus(&self, r: f64) -> Result<f64> {
        Ok(self.constants.time_modulus.eval(&Vars {
            r,
            ..Default::default()
        })?)
    }
}

/// Sampling box for [`check_structure`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub t: (f64, f64),
    /// One range per space dimension.
    pub x: Vec<(f64, f64)>,
    pub z: (f64, f64),
    /// Every component of `xi` is drawn from this range.
    pub xi: (f64, f64),
}

impl SampleBox {
    pub fn unit(dim: usize) -> Self {
        SampleBox {
            t: (0.0, 1.0),
            x: vec![(0.0, 1.0); dim],
            z: (-2.0, 2.0),
            xi: (-10.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub name: String,
    /// Smallest `rhs - lhs` seen; negative means violated.
    pub worst_margin: f64,
    /// Magnitude of the terms at the worst sample, used to scale the tolerance.
    pub scale: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub worst_sample: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    pub flux: String,
    pub samples: usize,
    pub seed: u64,
    pub conditions: Vec<ConditionReport>,
}

impl StructureReport {
    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

const RELATIVE_TOL: f64 = 1e-12;

struct Tracker {
    name: &'static str,
    worst: f64,
    scale: f64,
    sample: String,
    failed: bool,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Tracker {
            name,
            worst: f64::INFINITY,
            scale: 0.0,
            sample: String::new(),
            failed: false,
        }
    }

    fn record(&mut self, margin: f64, scale: f64, sample: impl FnOnce() -> String) {
        let fails = margin < -RELATIVE_TOL * (1.0 + scale);
        // Keep the first failing sample if any, otherwise the smallest margin.
        if (fails && !self.failed) || (fails == self.failed && margin < self.worst) {
            self.worst = margin;
            self.scale = scale;
            self.sample = sample();
            self.failed |= fails;
        }
    }

    fn finish(self) -> ConditionReport {
        let tolerance = RELATIVE_TOL * (1.0 + self.scale);
        ConditionReport {
            name: self.name.to_string(),
            worst_margin: self.worst,
            scale: self.scale,
            tolerance,
            pass: !self.failed,
            worst_sample: self.sample,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Samples the growth (L1), coercivity (L2), monotonicity (L3), continuity
/// (L4) and zero-gradient (L5) conditions, plus the sign condition
/// `A(xi) . xi >= 0`. Violations are reported, never raised, except for
/// expression evaluation failures.
pub fn check_structure(
    flux: &FluxModel,
    samples: usize,
    seed: u64,
    sample_box: &SampleBox,
) -> Result<StructureReport> {
    let dim = sample_box.x.len();
    let k = flux.constants();
    let p = flux.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |r: (f64, f64), rng: &mut ChaCha8Rng| {
        if r.1 > r.0 {
            rng.gen_range(r.0..=r.1)
        } else {
            r.0
        }
    };
    let mut growth = Tracker::new("L1_growth");
    let mut coercive = Tracker::new("L2_coercivity");
    let mut monotone = Tracker::new("L3_monotonicity");
    let mut continuity = Tracker::new("L4_continuity");
    let mut zero = Tracker::new("L5_zero_gradient");
    let mut sign = Tracker::new("nonnegative_pairing");

    for _ in 0..samples.max(1) {
        let t = draw(sample_box.t, &mut rng);
        let s = draw(sample_box.t, &mut rng);
        let mut x = [0.0; 2];
        let mut y = [0.0; 2];
        let mut xi = [0.0; 2];
        let mut eta = [0.0; 2];
        for a in 0..dim {
            x[a] = draw(sample_box.x[a], &mut rng);
            y[a] = draw(sample_box.x[a], &mut rng);
            xi[a] = draw(sample_box.xi, &mut rng);
            eta[a] = draw(sample_box.xi, &mut rng);
        }
        let z = draw(sample_box.z, &mut rng);
        let w = draw(sample_box.z, &mut rng);
        let (x, y, xi, eta) = (&x[..dim], &y[..dim], &xi[..dim], &eta[..dim]);
        let desc = || format!("t={t:.6}, x={x:?}, z={z:.6}, xi={xi:?}");

        let a = flux.eval_raw(t, x, z, xi)?;
        let a = &a[..dim];
        let nxi = norm(xi);

        let rhs = k.growth_c * nxi.powf(p - 1.0) + k.lower_b;
        growth.record(rhs - norm(a), rhs, desc);

        let pair = dot(a, xi);
        let bound = k.coercivity_alpha * nxi.powf(p) - k.lower_d;
        coercive.record(pair - bound, pair.abs() + bound.abs(), desc);
        sign.record(pair, pair.abs(), desc);

        let b = flux.eval_raw(t, x, z, eta)?;
        let diff_a: Vec<f64> = a.iter().zip(&b[..dim]).map(|(u, v)| u - v).collect();
        let diff_xi: Vec<f64> = xi.iter().zip(eta).map(|(u, v)| u - v).collect();
        let mono = dot(&diff_a, &diff_xi);
        let mono_scale = norm(a) * nxi + norm(&b[..dim]) * norm(eta);
        monotone.record(mono, mono_scale, || {
            format!("t={t:.6}, x={x:?}, z={z:.6}, xi={xi:?}, xi*={eta:?}")
        });

        let c = flux.eval_raw(s, y, w, xi)?;
        let gap = norm(&a.iter().zip(&c[..dim]).map(|(u, v)| u - v).collect::<Vec<_>>());
        let dist = (t - s).abs() + norm(&x.iter().zip(y).map(|(u, v)| u - v).collect::<Vec<_>>());
        let allowed = (flux.modulus(dist)? + k.z_lipschitz * (z - w).abs()) * nxi.powf(p - 1.0);
        continuity.record(allowed - gap, allowed + gap, || {
            format!("(t,x,z)=({t:.6},{x:?},{z:.6}) vs ({s:.6},{y:?},{w:.6}), xi={xi:?}")
        });

        let zero_xi = [0.0; 2];
        let a0 = flux.eval_raw(t, x, z, &zero_xi[..dim])?;
        zero.record(-norm(&a0[..dim]), 0.0, desc);
    }

    Ok(StructureReport {
        flux: flux.kind.name().to_string(),
        samples: samples.max(1),
        seed,
        conditions: vec![
            growth.finish(),
            coercive.finish(),
            monotone.finish(),
            continuity.finish(),
            zero.finish(),
            sign.finish(),
        ],
    })
}
