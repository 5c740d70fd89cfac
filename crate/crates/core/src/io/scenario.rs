//! Scenario files: sectioned `key = value` text with `#` comments.
//!
//! ```text
//! [grid]    dim, xmin, xmax, (ymin, ymax,) h
//! [time]    T, slices, substeps
//! [domain]  type = moving_intervals | implicit
//!           left, right, jumps = "t1: l1, r1; t2: l2, r2"   or   phi
//! [flux]    type = p_laplacian | linear_diffusion | z_modulated | custom
//!           p, eps_reg, and for custom: a1, a2, c, alpha, b, d, C_z, omega
//! [data]    u0, psi, source
//! [solver]  newton_tol, max_newton, max_picard
//! [output]  dir, frames = all | knots
//! ```
//!
//! Numeric values may be constant expressions such as `1/128`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::expr::{parse_expr, Expr, Var, Vars};
use crate::flux::{FluxKind, FluxModel, StructureConstants, DEFAULT_EPS_REG};
use crate::geometry::{rasterize, section, DomainShape, Grid, TimeDomain, Track};
use crate::slice_solver::{BoundaryData, SolverConfig};
use crate::stitcher::{FrameMode, OutputOptions, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub line: Option<usize>,
    pub section: Option<String>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(s) = &self.section {
            write!(f, "[{s}] ")?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario:\n  {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<Issue>),
}

impl ScenarioError {
    pub fn issues(&self) -> &[Issue] {
        match self {
            ScenarioError::Invalid(v) => v,
            ScenarioError::Read { .. } => &[],
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("grid", &["dim", "xmin", "xmax", "ymin", "ymax", "h"]),
    ("time", &["T", "slices", "substeps"]),
    ("domain", &["type", "left", "right", "jumps", "phi"]),
    (
        "flux",
        &["type", "p", "eps_reg", "a1", "a2", "c", "alpha", "b", "d", "C_z", "omega"],
    ),
    ("data", &["u0", "psi", "source"]),
    ("solver", &["newton_tol", "max_newton", "max_picard"]),
    ("output", &["dir", "frames"]),
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

type Sections = BTreeMap<&'static str, BTreeMap<&'static str, Entry>>;

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn tokenize(text: &str, issues: &mut Vec<Issue>) -> Sections {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<(&'static str, &'static [&'static str])> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let s = strip_comment(raw).trim();
        if s.is_empty() {
            continue;
        }
        let issue = |section: Option<&str>, message: String| Issue {
            line: Some(line),
            section: section.map(str::to_string),
            message,
        };
        if let Some(name) = s.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                issues.push(issue(None, format!("malformed section header '{s}'")));
                current = None;
                continue;
            };
            let name = name.trim();
            match SECTIONS.iter().find(|(sec, _)| *sec == name) {
                Some(&(sec, keys)) => {
                    if out.contains_key(sec) {
                        issues.push(issue(Some(sec), "section appears twice".into()));
                    }
                    out.entry(sec).or_default();
                    current = Some((sec, keys));
                }
                None => {
                    issues.push(issue(None, format!("unknown section '{name}'")));
                    current = None;
                }
            }
            continue;
        }
        let Some((key, value)) = s.split_once('=') else {
            issues.push(issue(
                current.map(|c| c.0),
                format!("expected 'key = value', found '{s}'"),
            ));
            continue;
        };
        let Some((sec, keys)) = current else {
            issues.push(issue(None, format!("key '{}' outside any section", key.trim())));
            continue;
        };
        let key = key.trim();
        let Some(&key) = keys.iter().find(|k| **k == key) else {
            issues.push(issue(Some(sec), format!("unknown key '{key}'")));
            continue;
        };
        let value = value.trim();
        let value = match value.strip_prefix('"') {
            Some(rest) => match rest.strip_suffix('"') {
                Some(inner) if !inner.contains('"') => inner.to_string(),
                _ => {
                    issues.push(issue(Some(sec), format!("unterminated string for '{key}'")));
                    continue;
                }
            },
            None => value.to_string(),
        };
        let table = out.entry(sec).or_default();
        if table.contains_key(key) {
            issues.push(issue(Some(sec), format!("duplicate key '{key}'")));
        }
        table.insert(key, Entry { value, line });
    }
    out
}

struct Reader<'a> {
    sections: &'a Sections,
    issues: Vec<Issue>,
}

impl Reader<'_> {
    fn entry(&self, sec: &str, key: &str) -> Option<&Entry> {
        self.sections.get(sec).and_then(|t| t.get(key))
    }

    fn push(&mut self, sec: &str, line: Option<usize>, message: String) {
        self.issues.push(Issue {
            line,
            section: Some(sec.to_string()),
            message,
        });
    }

    fn missing(&mut self, sec: &str, key: &str) {
        self.push(sec, None, format!("missing required key '{key}'"));
    }

    fn expr(&mut self, sec: &str, key: &str) -> Option<Expr> {
        let e = self.entry(sec, key)?.clone();
        match parse_expr(&e.value) {
            Ok(x) => Some(x),
            Err(err) => {
                self.push(sec, Some(e.line), format!("{key}: {err}"));
                None
            }
        }
    }

    fn req_expr(&mut self, sec: &str, key: &str) -> Option<Expr> {
        if self.entry(sec, key).is_none() {
            self.missing(sec, key);
            return None;
        }
        self.expr(sec, key)
    }

    fn real(&mut self, sec: &str, key: &str) -> Option<f64> {
        let line = self.entry(sec, key)?.line;
        let e = self.expr(sec, key)?;
        match e.eval(&Vars::default()) {
            Ok(v) if v.is_finite() && !has_variables(&e) => Some(v),
            Ok(_) if has_variables(&e) => {
                self.push(sec, Some(line), format!("{key} must be a constant"));
                None
            }
            Ok(v) => {
                self.push(sec, Some(line), format!("{key} is not finite ({v})"));
                None
            }
            Err(err) => {
                self.push(sec, Some(line), format!("{key}: {err}"));
                None
            }
        }
    }

    fn req_real(&mut self, sec: &str, key: &str) -> Option<f64> {
        if self.entry(sec, key).is_none() {
            self.missing(sec, key);
            return None;
        }
        self.real(sec, key)
    }

    fn integer(&mut self, sec: &str, key: &str) -> Option<usize> {
        let e = self.entry(sec, key)?.clone();
        match e.value.parse::<usize>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.push(
                    sec,
                    Some(e.line),
                    format!("{key} must be a nonnegative integer, got '{}'", e.value),
                );
                None
            }
        }
    }

    fn req_integer(&mut self, sec: &str, key: &str) -> Option<usize> {
        if self.entry(sec, key).is_none() {
            self.missing(sec, key);
            return None;
        }
        self.integer(sec, key)
    }

    fn word(&mut self, sec: &str, key: &str, allowed: &[&str]) -> Option<String> {
        let e = self.entry(sec, key)?.clone();
        if allowed.contains(&e.value.as_str()) {
            Some(e.value)
        } else {
            self.push(
                sec,
                Some(e.line),
                format!("{key} must be one of {}, got '{}'", allowed.join(" | "), e.value),
            );
            None
        }
    }

    /// Keys present in `sec` that the chosen variant does not use.
    fn reject_unused(&mut self, sec: &str, allowed: &[&str], variant: &str) {
        let extra: Vec<(String, usize)> = self
            .sections
            .get(sec)
            .map(|t| {
                t.iter()
                    .filter(|(k, _)| !allowed.contains(k))
                    .map(|(k, e)| (k.to_string(), e.line))
                    .collect()
            })
            .unwrap_or_default();
        for (k, line) in extra {
            self.push(sec, Some(line), format!("key '{k}' does not apply to {variant}"));
        }
    }
}

fn has_variables(e: &Expr) -> bool {
    [Var::T, Var::X, Var::Y, Var::Z, Var::Xi1, Var::Xi2, Var::R]
        .iter()
        .any(|v| e.mentions(*v))
}

/// Splits at top-level commas (outside parentheses).
fn split_top_level(s: &str) -> Vec<&str> {
    let mut depth = 0i32;
    let mut parts = Vec::new();
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn parse_jumps(src: &str) -> Result<Vec<(f64, Expr, Expr)>, String> {
    let mut out = Vec::new();
    for item in src.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (t, rest) = item
            .split_once(':')
            .ok_or_else(|| format!("jump '{item}' needs the form 't: left, right'"))?;
        let t = parse_expr(t.trim())
            .map_err(|e| e.to_string())?
            .eval(&Vars::default())
            .map_err(|e| e.to_string())?;
        let parts = split_top_level(rest);
        if parts.len() != 2 {
            return Err(format!("jump '{item}' needs exactly two endpoint expressions"));
        }
        let l = parse_expr(parts[0].trim()).map_err(|e| e.to_string())?;
        let r = parse_expr(parts[1].trim()).map_err(|e| e.to_string())?;
        out.push((t, l, r));
    }
    Ok(out)
}

/// Parses and fully validates a scenario, reporting every problem at once.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut issues = Vec::new();
    let sections = tokenize(text, &mut issues);
    let mut r = Reader {
        sections: &sections,
        issues,
    };

    // [grid]
    let dim = r.req_integer("grid", "dim");
    if let Some(d) = dim {
        if d != 1 && d != 2 {
            let line = r.entry("grid", "dim").map(|e| e.line);
            r.push("grid", line, format!("dim must be 1 or 2, got {d}"));
        }
    }
    let h = r.req_real("grid", "h");
    let mut axes = vec![("xmin", "xmax")];
    if dim == Some(2) {
        axes.push(("ymin", "ymax"));
    } else if dim == Some(1) {
        r.reject_unused("grid", &["dim", "xmin", "xmax", "h"], "a 1D grid");
    }
    let mut bounds = Vec::new();
    for (lo, hi) in &axes {
        bounds.push((r.req_real("grid", lo), r.req_real("grid", hi)));
    }
    let mut grid = None;
    if let (Some(h), true) = (h, bounds.iter().all(|b| b.0.is_some() && b.1.is_some())) {
        if !(h > 0.0) {
            r.push("grid", None, format!("h must be positive, got {h}"));
        } else {
            let mut origin = Vec::new();
            let mut counts = Vec::new();
            let mut ok = true;
            for (axis, b) in bounds.iter().enumerate() {
                let (lo, hi) = (b.0.unwrap(), b.1.unwrap());
                let ratio = (hi - lo) / h;
                let n = ratio.round();
                if !(n >= 1.0) || (ratio - n).abs() > 1e-9 * n.max(1.0) {
                    r.push(
                        "grid",
                        None,
                        format!("axis {axis}: (max - min) / h = {ratio} is not a positive integer"),
                    );
                    ok = false;
                }
                origin.push(lo);
                counts.push(n.max(0.0) as usize);
            }
            if ok {
                let spacing = vec![h; origin.len()];
                match Grid::new(&origin, &spacing, &counts) {
                    Ok(g) => grid = Some(g),
                    Err(e) => r.push("grid", None, e.to_string()),
                }
            }
        }
    }

    // [time]
    let horizon = r.req_real("time", "T");
    if let Some(t) = horizon {
        if !(t > 0.0) {
            r.push("time", None, format!("T must be positive, got {t}"));
        }
    }
    let slices = r.req_integer("time", "slices");
    let substeps = r.req_integer("time", "substeps");
    for (key, v) in [("slices", slices), ("substeps", substeps)] {
        if v == Some(0) {
            r.push("time", None, format!("{key} must be at least 1"));
        }
    }

    // [domain]
    let dtype = if r.entry("domain", "type").is_none() {
        r.missing("domain", "type");
        None
    } else {
        r.word("domain", "type", &["moving_intervals", "implicit"])
    };
    let mut domain = None;
    match dtype.as_deref() {
        Some("moving_intervals") => {
            r.reject_unused("domain", &["type", "left", "right", "jumps"], "moving_intervals");
            if dim == Some(2) {
                r.push("domain", None, "moving_intervals needs dim = 1".into());
            }
            let left = r.req_expr("domain", "left");
            let right = r.req_expr("domain", "right");
            let mut jumps = Vec::new();
            if let Some(e) = r.entry("domain", "jumps").cloned() {
                match parse_jumps(&e.value) {
                    Ok(j) => jumps = j,
                    Err(m) => r.push("domain", Some(e.line), format!("jumps: {m}")),
                }
            }
            if let (Some(l), Some(rt), Some(t)) = (left, right, horizon) {
                let mut track = Track::smooth(l, rt);
                for (at, l, rt) in jumps {
                    if !(at > 0.0 && at < t) {
                        r.push("domain", None, format!("jump time {at} must lie in (0, T)"));
                    }
                    track = track.with_jump(at, l, rt);
                }
                domain = Some(TimeDomain::moving_intervals(vec![track], t));
            }
        }
        Some("implicit") => {
            r.reject_unused("domain", &["type", "phi"], "implicit domains");
            let phi = r.req_expr("domain", "phi");
            if let (Some(phi), Some(g), Some(t)) = (phi, &grid, horizon) {
                let b: Vec<(f64, f64)> = (0..g.dim()).map(|a| (g.lower(a), g.upper(a))).collect();
                domain = Some(TimeDomain::implicit(phi, g.dim(), &b, t));
            }
        }
        _ => {}
    }
    if let (Some(d), Some(g)) = (&domain, &grid) {
        for m in d.validate(g) {
            r.push("domain", None, m);
        }
    }

    // [flux]
    let ftype = if r.entry("flux", "type").is_none() {
        r.missing("flux", "type");
        None
    } else {
        r.word("flux", "type", &["p_laplacian", "linear_diffusion", "z_modulated", "custom"])
    };
    let p = r.real("flux", "p");
    let mut flux = None;
    match ftype.as_deref() {
        Some("linear_diffusion") => {
            r.reject_unused("flux", &["type", "p"], "linear_diffusion");
            if let Some(p) = p {
                if p != 2.0 {
                    r.push("flux", None, format!("linear_diffusion has p = 2, got {p}"));
                }
            }
            flux = Some(FluxModel::linear_diffusion());
        }
        Some(kind @ ("p_laplacian" | "z_modulated")) => {
            r.reject_unused("flux", &["type", "p", "eps_reg"], kind);
            if p.is_none() && r.entry("flux", "p").is_none() {
                r.missing("flux", "p");
            }
            let eps = if r.entry("flux", "eps_reg").is_some() {
                r.real("flux", "eps_reg")
            } else {
                Some(DEFAULT_EPS_REG)
            };
            if let (Some(p), Some(eps)) = (p, eps) {
                flux = Some(if kind == "p_laplacian" {
                    FluxModel::p_laplacian(p, eps)
                } else {
                    FluxModel::z_modulated(p, eps)
                });
            }
        }
        Some("custom") => {
            r.reject_unused(
                "flux",
                &["type", "p", "a1", "a2", "c", "alpha", "b", "d", "C_z", "omega"],
                "custom fluxes",
            );
            if p.is_none() && r.entry("flux", "p").is_none() {
                r.missing("flux", "p");
            }
            let mut comps = vec![r.req_expr("flux", "a1")];
            if dim == Some(2) {
                comps.push(r.req_expr("flux", "a2"));
            } else if r.entry("flux", "a2").is_some() {
                let line = r.entry("flux", "a2").map(|e| e.line);
                r.push("flux", line, "a2 needs dim = 2".into());
            }
            let c = r.req_real("flux", "c");
            let alpha = r.req_real("flux", "alpha");
            let opt = |r: &mut Reader, k: &str| {
                if r.entry("flux", k).is_some() {
                    r.real("flux", k)
                } else {
                    Some(0.0)
                }
            };
            let b = opt(&mut r, "b");
            let d = opt(&mut r, "d");
            let cz = opt(&mut r, "C_z");
            let omega = if r.entry("flux", "omega").is_some() {
                r.expr("flux", "omega")
            } else {
                Some(Expr::constant(0.0))
            };
            if let Some(om) = &omega {
                if [Var::T, Var::X, Var::Y, Var::Z, Var::Xi1, Var::Xi2].iter().any(|v| om.mentions(*v)) {
                    let line = r.entry("flux", "omega").map(|e| e.line);
                    r.push("flux", line, "omega may only depend on r".into());
                }
            }
            let comps: Option<Vec<Expr>> = comps.into_iter().collect();
            if let (Some(comps), Some(p), Some(c), Some(alpha), Some(b), Some(d), Some(cz), Some(om)) =
                (comps, p, c, alpha, b, d, cz, omega)
            {
                let consts = StructureConstants {
                    growth_c: c,
                    coercivity_alpha: alpha,
                    lower_b: b,
                    lower_d: d,
                    z_lipschitz: cz,
                    time_modulus: om,
                };
                flux = Some(FluxModel::custom(comps, p, consts));
            }
        }
        _ => {}
    }
    if let Some(f) = &flux {
        for m in f.validate() {
            r.push("flux", None, m);
        }
    }

    // [data]
    let u0 = r.req_expr("data", "u0");
    let psi = r.req_expr("data", "psi");
    let source = if r.entry("data", "source").is_some() {
        r.expr("data", "source")
    } else {
        Some(Expr::constant(0.0))
    };

    // [solver]
    let mut solver = SolverConfig::default();
    if let Some(v) = r.real("solver", "newton_tol") {
        if v > 0.0 {
            solver.newton_tol = v;
        } else {
            r.push("solver", None, format!("newton_tol must be positive, got {v}"));
        }
    }
    if let Some(v) = r.integer("solver", "max_newton") {
        solver.max_newton = v;
    }
    if let Some(v) = r.integer("solver", "max_picard") {
        solver.max_picard = v;
    }

    // [output]
    let mut output = OutputOptions::default();
    if let Some(e) = r.entry("output", "dir") {
        output.dir = Some(PathBuf::from(&e.value));
    }
    if let Some(w) = r.word("output", "frames", &["all", "knots"]) {
        output.frames = if w == "all" { FrameMode::All } else { FrameMode::Knots };
    }

    // u0 must be finite on the initial active set.
    if let (Some(g), Some(d), Some(u0)) = (&grid, &domain, &u0) {
        if r.issues.is_empty() {
            match section(d, 0.0).and_then(|reg| rasterize(&reg, g)) {
                Ok(mask) => {
                    for &i in mask.active() {
                        let x = g.point(i);
                        match u0.eval(&Vars::at(0.0, &x)) {
                            Ok(v) if v.is_finite() => {}
                            Ok(v) => {
                                r.push("data", None, format!("u0 = {v} at x = {x:?}"));
                                break;
                            }
                            Err(e) => {
                                r.push("data", None, format!("u0 at x = {x:?}: {e}"));
                                break;
                            }
                        }
                    }
                }
                Err(e) => r.push("domain", None, e.to_string()),
            }
        }
    }

    if !r.issues.is_empty() {
        return Err(ScenarioError::Invalid(r.issues));
    }
    Ok(Scenario {
        grid: grid.expect("validated"),
        domain: domain.expect("validated"),
        n_slices: slices.expect("validated"),
        substeps: substeps.expect("validated"),
        flux: flux.expect("validated"),
        boundary: BoundaryData::new(psi.expect("validated")),
        u0: u0.expect("validated"),
        source: source.expect("validated"),
        solver,
        output,
    })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Canonical text of a scenario; parses back to an equal value.
pub fn print_scenario(s: &Scenario) -> Result<String, String> {
    let mut o = String::new();
    let g = &s.grid;
    let w = &mut o;
    let _ = writeln!(w, "[grid]\ndim = {}", g.dim());
    let _ = writeln!(w, "xmin = {}\nxmax = {}", num(g.lower(0)), num(g.upper(0)));
    if g.dim() == 2 {
        let _ = writeln!(w, "ymin = {}\nymax = {}", num(g.lower(1)), num(g.upper(1)));
    }
    let _ = writeln!(w, "h = {}", num(g.spacing(0)));
    let _ = writeln!(
        w,
        "\n[time]\nT = {}\nslices = {}\nsubsteps = {}",
        num(s.horizon()),
        s.n_slices,
        s.substeps
    );
    let _ = writeln!(w, "\n[domain]");
    match s.domain.shape() {
        DomainShape::MovingIntervals(tracks) => {
            let [track] = tracks.as_slice() else {
                return Err("scenario files hold a single interval track".into());
            };
            let pieces = track.pieces();
            let _ = writeln!(w, "type = moving_intervals");
            let _ = writeln!(w, "left = \"{}\"\nright = \"{}\"", pieces[0].left, pieces[0].right);
            if pieces.len() > 1 {
                let j: Vec<String> = pieces[1..]
                    .iter()
                    .map(|p| format!("{}: {}, {}", num(p.start), p.left, p.right))
                    .collect();
                let _ = writeln!(w, "jumps = \"{}\"", j.join("; "));
            }
        }
        DomainShape::Implicit { phi, .. } => {
            let _ = writeln!(w, "type = implicit\nphi = \"{phi}\"");
        }
    }
    let f = &s.flux;
    let _ = writeln!(w, "\n[flux]\ntype = {}", f.kind().name());
    match f.kind() {
        FluxKind::LinearDiffusion => {}
        FluxKind::PLaplacian | FluxKind::ZModulated => {
            let _ = writeln!(w, "p = {}\neps_reg = {}", num(f.p()), num(f.eps_reg()));
        }
        FluxKind::Custom(comps) => {
            let k = f.constants();
            let _ = writeln!(w, "p = {}", num(f.p()));
            for (i, c) in comps.iter().enumerate() {
                let _ = writeln!(w, "a{} = \"{c}\"", i + 1);
            }
            let _ = writeln!(
                w,
                "c = {}\nalpha = {}\nb = {}\nd = {}\nC_z = {}\nomega = \"{}\"",
                num(k.growth_c),
                num(k.coercivity_alpha),
                num(k.lower_b),
                num(k.lower_d),
                num(k.z_lipschitz),
                k.time_modulus
            );
        }
    }
    let _ = writeln!(
        w,
        "\n[data]\nu0 = \"{}\"\npsi = \"{}\"\nsource = \"{}\"",
        s.u0,
        s.boundary.expr(),
        s.source
    );
    let _ = writeln!(
        w,
        "\n[solver]\nnewton_tol = {}\nmax_newton = {}\nmax_picard = {}",
        num(s.solver.newton_tol),
        s.solver.max_newton,
        s.solver.max_picard
    );
    let _ = writeln!(w, "\n[output]");
    if let Some(d) = &s.output.dir {
        let _ = writeln!(w, "dir = \"{}\"", d.display());
    }
    let mode = match s.output.frames {
        FrameMode::All => "all",
        FrameMode::Knots => "knots",
    };
    let _ = writeln!(w, "frames = {mode}");
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[grid]
dim = 1
xmin = -0.25
xmax = 1.25
h = 1/16
[time]
T = 0.1
slices = 4
substeps = 2
[domain]
type = moving_intervals
left = \"0\"
right = \"1\"
[flux]
type = linear_diffusion
[data]
u0 = \"sin(pi*x)\"   # initial bump
psi = \"0\"
";

    #[test]
    fn minimal_file_gets_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.grid.node_count(), 25);
        assert_eq!(s.solver, SolverConfig::default());
        assert_eq!(s.output.frames, FrameMode::Knots);
        assert!(s.source.is_zero_literal());
        assert_eq!(s.flux.p(), 2.0);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut text = MINIMAL.replace("linear_diffusion", "p_laplacian\np = 2.5");
        text = text.replace("right = \"1\"", "right = \"0.9 + t/3\"\njumps = \"0.05: 0.125, max(0.6, 1 - t)\"");
        let s = parse_scenario(&text).unwrap();
        let printed = print_scenario(&s).unwrap();
        let again = parse_scenario(&printed).unwrap();
        assert_eq!(s, again);
        assert_eq!(printed, print_scenario(&again).unwrap());
    }

    #[test]
    fn custom_and_implicit_round_trip() {
        let text = "\
[grid]
dim = 2
xmin = -1
xmax = 1
ymin = -1
ymax = 1
h = 0.125
[time]
T = 0.5
slices = 2
substeps = 2
[domain]
type = implicit
phi = \"x^2 + y^2 - (0.4 + 0.2*t)^2\"
[flux]
type = custom
p = 2
a1 = \"xi1\"
a2 = \"xi2 * (1 + 0.5*sin(z)^2)\"
c = 1.5
alpha = 1
C_z = 1
omega = \"r\"
[data]
u0 = \"1\"
psi = \"1\"
[output]
frames = all
dir = \"out dir\"
";
        let s = parse_scenario(text).unwrap();
        let again = parse_scenario(&print_scenario(&s).unwrap()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.output.frames, FrameMode::All);
    }

    #[test]
    fn low_p_is_rejected() {
        let text = MINIMAL.replace("linear_diffusion", "p_laplacian\np = 0.5");
        let err = parse_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("p must exceed 1"), "{err}");
    }

    #[test]
    fn unknown_key_names_section_and_line() {
        let text = MINIMAL.replace("type = linear_diffusion", "type = linear_diffusion\nviscosity = 3");
        let err = parse_scenario(&text).unwrap_err();
        let issue = &err.issues()[0];
        assert_eq!(issue.section.as_deref(), Some("flux"));
        assert_eq!(issue.line, Some(16));
        assert!(issue.message.contains("viscosity"));
    }

    #[test]
    fn all_problems_are_reported_together() {
        let text = MINIMAL
            .replace("h = 1/16", "h = 0.4")
            .replace("slices = 4", "slices = 0")
            .replace("[data]", "[data]\nbogus = 1\n[extra]")
            .replace("psi = \"0\"", "");
        let err = parse_scenario(&text).unwrap_err();
        let msgs: Vec<String> = err.issues().iter().map(|i| i.to_string()).collect();
        let all = msgs.join("\n");
        for needle in ["not a positive integer", "slices must be", "bogus", "unknown section", "'psi'"] {
            assert!(all.contains(needle), "missing {needle} in\n{all}");
        }
    }

    #[test]
    fn expression_errors_carry_position() {
        let text = MINIMAL.replace("sin(pi*x)", "sin(pi*x");
        let err = parse_scenario(&text).unwrap_err();
        assert!(err.issues()[0].line == Some(17));
        let text = MINIMAL.replace("sin(pi*x)", "log(x - 2)");
        assert!(parse_scenario(&text).is_err());
    }
}
