//! Frame files and the run manifest.
//!
//! Each frame file is whitespace-separated text with one row per grid node
//! in index order: `t x [y] u flag u_extended`, where `flag` is 1 for
//! active, 0 for ghost and -1 for outside nodes. Undefined values print as
//! `nan`.

use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::Grid;
use crate::stitcher::{FrameMode, Scenario, SpaceTimeField};

use super::scenario::print_scenario;

/// Seventeen significant digits.
pub fn fmt_real(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file: String,
    pub t: f64,
    pub slice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: String,
    pub frames: Vec<ManifestFrame>,
    pub knots: Vec<f64>,
    pub delta: f64,
    pub scenario_sha256: String,
}

pub fn scenario_hash(scn: &Scenario) -> String {
    let text = print_scenario(scn).unwrap_or_else(|_| format!("{scn:?}"));
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

fn frame_text(grid: &Grid, field: &SpaceTimeField, j: usize) -> String {
    let mask = field.mask_at(j);
    let t = fmt_real(field.stamps[j].t);
    let mut out = String::with_capacity(grid.node_count() * 100);
    out.push_str(if grid.dim() == 2 {
        "# t x y u flag u_extended\n"
    } else {
        "# t x u flag u_extended\n"
    });
    for i in 0..grid.node_count() {
        let c = grid.coords(i);
        out.push_str(&t);
        for &x in &c[..grid.dim()] {
            out.push(' ');
            out.push_str(&fmt_real(x));
        }
        out.push(' ');
        out.push_str(&fmt_real(field.frames[j][i]));
        out.push(' ');
        out.push_str(&mask.kind(i).flag().to_string());
        out.push(' ');
        out.push_str(&fmt_real(field.extended_frames[j][i]));
        out.push('\n');
    }
    out
}

/// Writes the selected frames and `manifest.json` into `dir` and returns the
/// paths written, frames first.
pub fn write_frames(
    field: &SpaceTimeField,
    scn: &Scenario,
    dir: &Path,
    mode: FrameMode,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let selected: Vec<usize> = match mode {
        FrameMode::All => (0..field.len()).collect(),
        FrameMode::Knots => field.knot_frames(),
    };
    let mut written = Vec::with_capacity(selected.len() + 1);
    let mut entries = Vec::with_capacity(selected.len());
    for (n, &j) in selected.iter().enumerate() {
        let name = format!("frame_{n:05}.dat");
        let path = dir.join(&name);
        fs::File::create(&path)?.write_all(frame_text(&scn.grid, field, j).as_bytes())?;
        written.push(path);
        entries.push(ManifestFrame {
            file: name,
            t: field.stamps[j].t,
            slice: field.stamps[j].slice,
        });
    }
    let manifest = Manifest {
        mode: match mode {
            FrameMode::All => "all".into(),
            FrameMode::Knots => "knots".into(),
        },
        frames: entries,
        knots: field.plan.knots().to_vec(),
        delta: field.plan.delta(),
        scenario_sha256: scenario_hash(scn),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
    fs::write(&path, json + "\n")?;
    written.push(path);
    Ok(written)
}

/// One parsed frame row.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: f64,
    pub flag: i8,
    pub u_extended: f64,
}

pub fn read_frame(path: &Path) -> io::Result<Vec<FrameRow>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 5 && cols.len() != 6 {
            return Err(bad(format!("line {}: expected 5 or 6 columns", n + 1)));
        }
        let real = |s: &str| -> io::Result<f64> {
            s.parse::<f64>()
                .map_err(|e| bad(format!("line {}: {e}", n + 1)))
        };
        let k = cols.len();
        rows.push(FrameRow {
            t: real(cols[0])?,
            x: cols[1..k - 3].iter().map(|c| real(c)).collect::<io::Result<_>>()?,
            u: real(cols[k - 3])?,
            flag: cols[k - 2]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", n + 1)))?,
            u_extended: real(cols[k - 1])?,
        });
    }
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> io::Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
