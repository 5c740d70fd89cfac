//! `timeslice` command line: run scenarios, refinement studies, flux checks,
//! geometry previews and estimate verification.
//!
//! Exit codes: 0 success, 1 a report failed, 2 input error, 3 solver stall.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use timeslice_core::diagnostics::{
    energy_report, l1_contraction_report, max_principle_report, refinement_study, slab_hausdorff,
    DiagnosticError, EstimateReport,
};
use timeslice_core::expr::parse_expr;
use timeslice_core::flux::{check_structure, SampleBox};
use timeslice_core::geometry::{section, Region};
use timeslice_core::io::{load_scenario, report_json, scenario_hash, write_frames};
use timeslice_core::stitcher::{run_scheme, FrameMode, Scenario, StitchError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_REPORT_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_STALL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "timeslice", version, about = "Time-slicing solver for parabolic problems on moving domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FramesArg {
    All,
    Knots,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the scheme and write frames, manifest and summary.
    Run {
        scenario: PathBuf,
        /// Output directory; overrides [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which frames to write; overrides [output] frames.
        #[arg(long, value_enum)]
        frames: Option<FramesArg>,
    },
    /// Refinement study doubling the slice count per level.
    Refine {
        scenario: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Sample the structural conditions of the scenario's flux.
    CheckFlux {
        scenario: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Preview the slice plan and the slab Hausdorff distance.
    Geometry { scenario: PathBuf },
    /// Maximum principle, energy and (with --u0b) L1 contraction reports.
    Verify {
        scenario: PathBuf,
        /// Second initial datum for the L1 contraction check.
        #[arg(long)]
        u0b: Option<String>,
    },
}

enum Failure {
    Input(String),
    Stall(String),
}

impl From<StitchError> for Failure {
    fn from(e: StitchError) -> Self {
        if e.is_stall() {
            Failure::Stall(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<DiagnosticError> for Failure {
    fn from(e: DiagnosticError) -> Self {
        match e {
            DiagnosticError::Run(r) => r.into(),
            other => Failure::Input(other.to_string()),
        }
    }
}

type Outcome = Result<bool, Failure>;

fn load(path: &Path) -> Result<Scenario, Failure> {
    load_scenario(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    scenario_sha256: String,
    frames_written: usize,
    report: &'a timeslice_core::stitcher::RunReport,
}

fn cmd_run(path: &Path, out: Option<PathBuf>, frames: Option<FramesArg>) -> Outcome {
    let scn = load(path)?;
    let dir = out
        .or_else(|| scn.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mode = match frames {
        Some(FramesArg::All) => FrameMode::All,
        Some(FramesArg::Knots) => FrameMode::Knots,
        None => scn.output.frames,
    };
    let (field, report) = run_scheme(&scn)?;
    let files = write_frames(&field, &scn, &dir, mode)
        .map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    let summary = RunSummary {
        scenario_sha256: scenario_hash(&scn),
        frames_written: files.len() - 1,
        report: &report,
    };
    let json = report_json(&summary);
    write_file(&dir.join("summary.json"), &json)?;
    print!("{json}");
    eprintln!(
        "wrote {} frames to {} ({} slices, delta {})",
        files.len() - 1,
        dir.display(),
        report.n_slices,
        report.delta
    );
    Ok(true)
}

fn cmd_refine(path: &Path, levels: usize) -> Outcome {
    let scn = load(path)?;
    let study = refinement_study(&scn, levels)?;
    print!("{}", report_json(&study));
    Ok(true)
}

fn cmd_check_flux(path: &Path, samples: usize, seed: u64) -> Outcome {
    let scn = load(path)?;
    let mut sample_box = SampleBox::unit(scn.grid.dim());
    sample_box.t = (0.0, scn.horizon());
    sample_box.x = (0..scn.grid.dim())
        .map(|a| (scn.grid.lower(a), scn.grid.upper(a)))
        .collect();
    let report = check_structure(&scn.flux, samples, seed, &sample_box)
        .map_err(|e| Failure::Input(e.to_string()))?;
    print!("{}", report_json(&report));
    for c in report.conditions.iter().filter(|c| !c.pass) {
        eprintln!("{} violated: margin {:.3e} at {}", c.name, c.worst_margin, c.worst_sample);
    }
    Ok(report.all_pass())
}

#[derive(Serialize)]
struct SlicePreview {
    slice: usize,
    span: (f64, f64),
    active_nodes: usize,
    ghost_nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    intervals: Option<Vec<(f64, f64)>>,
}

#[derive(Serialize)]
struct GeometryPreview {
    n_slices: usize,
    delta: f64,
    jump_times: Vec<f64>,
    knots: Vec<f64>,
    slices: Vec<SlicePreview>,
    slab_hausdorff: f64,
}

fn cmd_geometry(path: &Path) -> Outcome {
    let scn = load(path)?;
    let plan = scn.plan()?;
    let mut slices = Vec::new();
    for k in 0..plan.n_slices() {
        let span = plan.span(k);
        let region = section(&scn.domain, span.0).map_err(|e| Failure::Input(e.to_string()))?;
        let intervals = match region {
            Region::Intervals(v) => Some(v),
            _ => None,
        };
        slices.push(SlicePreview {
            slice: k,
            span,
            active_nodes: plan.mask(k).active().len(),
            ghost_nodes: plan.mask(k).ghost().len(),
            intervals,
        });
    }
    let preview = GeometryPreview {
        n_slices: plan.n_slices(),
        delta: plan.delta(),
        jump_times: scn.domain.jump_times(),
        knots: plan.knots().to_vec(),
        slices,
        slab_hausdorff: slab_hausdorff(&scn, plan.knots())?,
    };
    print!("{}", report_json(&preview));
    Ok(true)
}

fn cmd_verify(path: &Path, u0b: Option<String>) -> Outcome {
    let scn = load(path)?;
    let second = match &u0b {
        Some(src) => Some(parse_expr(src).map_err(|e| Failure::Input(format!("--u0b: {e}")))?),
        None => None,
    };
    let (field, _) = run_scheme(&scn)?;
    let mut reports: Vec<EstimateReport> = vec![
        max_principle_report(&field, &scn)?,
        energy_report(&field, &scn)?,
    ];
    if let Some(b) = second {
        let mut r = l1_contraction_report(&scn, &scn.u0, &b)?;
        // the series must not grow either
        r.pass &= r.series_nonincreasing != Some(false);
        reports.push(r);
    }
    print!("{}", report_json(&reports));
    for r in &reports {
        eprintln!(
            "{}: {} (lhs {:.6e}, rhs {:.6e}, margin {:.3e})",
            r.name,
            if r.pass { "pass" } else { "FAIL" },
            r.lhs,
            r.rhs,
            r.margin
        );
    }
    Ok(reports.iter().all(|r| r.pass))
}

/// Parses `args` (including the program name) and runs the command.
pub fn cli_run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Run {
            scenario,
            out,
            frames,
        } => cmd_run(&scenario, out, frames),
        Command::Refine { scenario, levels } => cmd_refine(&scenario, levels),
        Command::CheckFlux {
            scenario,
            samples,
            seed,
        } => cmd_check_flux(&scenario, samples, seed),
        Command::Geometry { scenario } => cmd_geometry(&scenario),
        Command::Verify { scenario, u0b } => cmd_verify(&scenario, u0b),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_REPORT_FAILED,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            EXIT_INPUT
        }
        Err(Failure::Stall(m)) => {
            eprintln!("solver stalled: {m}");
            EXIT_STALL
        }
    }
}
