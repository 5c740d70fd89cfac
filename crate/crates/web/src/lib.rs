//! Browser bindings: run a 1D scenario into a space-time heatmap, sample a
//! p-Laplacian flux curve, and measure slab-vs-domain Hausdorff distances.
//! The plain functions are usable (and tested) natively; the `#[wasm_bindgen]`
//! wrappers only convert errors.

use timeslice_core::diagnostics::slab_hausdorff;
use timeslice_core::flux::FluxModel;
use timeslice_core::io::parse_scenario;
use timeslice_core::stitcher::{run_scheme, Scenario};
use wasm_bindgen::prelude::*;

/// Row-major `rows x cols` values of the extended field, one row per time
/// stamp (knots keep only the later frame), plus the active flags.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    times: Vec<f64>,
    xs: Vec<f64>,
    values: Vec<f64>,
    active: Vec<u8>,
}

#[wasm_bindgen]
impl Heatmap {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }
    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
    pub fn active(&self) -> Vec<u8> {
        self.active.clone()
    }
}

fn parse(text: &str) -> Result<Scenario, String> {
    parse_scenario(text).map_err(|e| e.to_string())
}

pub fn heatmap(text: &str) -> Result<Heatmap, String> {
    let scn = parse(text)?;
    if scn.grid.dim() != 1 {
        return Err("the heatmap needs a 1D scenario".into());
    }
    let (field, _) = run_scheme(&scn).map_err(|e| e.to_string())?;
    let cols = scn.grid.node_count();
    let xs = (0..cols).map(|i| scn.grid.coords(i)[0]).collect();
    let mut out = Heatmap {
        rows: 0,
        cols,
        times: Vec::new(),
        xs,
        values: Vec::new(),
        active: Vec::new(),
    };
    for j in 0..field.len() {
        let t = field.stamps[j].t;
        if out.times.last() == Some(&t) {
            // knot: the later frame wins
            out.rows -= 1;
            out.times.pop();
            out.values.truncate(out.rows * cols);
            out.active.truncate(out.rows * cols);
        }
        let mask = field.mask_at(j);
        out.times.push(t);
        out.values.extend_from_slice(&field.extended_frames[j]);
        out.active.extend((0..cols).map(|i| mask.is_active(i) as u8));
        out.rows += 1;
    }
    Ok(out)
}

/// `A(xi)` of the 1D p-Laplacian at `n` points evenly spread over
/// `[-xi_max, xi_max]`.
pub fn flux_curve(p: f64, eps_reg: f64, xi_max: f64, n: usize) -> Result<Vec<f64>, String> {
    let flux = FluxModel::p_laplacian(p, eps_reg);
    if let Some(msg) = flux.validate().into_iter().next() {
        return Err(msg);
    }
    if n < 2 || !(xi_max > 0.0) {
        return Err("need n >= 2 and xi_max > 0".into());
    }
    (0..n)
        .map(|i| {
            let xi = -xi_max + 2.0 * xi_max * i as f64 / (n - 1) as f64;
            flux.evaluate(0.0, &[0.0], 0.0, &[xi])
                .map(|a| a[0])
                .map_err(|e| e.to_string())
        })
        .collect()
}

/// Hausdorff distance between the slab approximation with `n_slices`
/// slices and the scenario's space-time domain.
pub fn slab_distance(text: &str, n_slices: usize) -> Result<f64, String> {
    let scn = parse(text)?.with_slices(n_slices);
    let plan = scn.plan().map_err(|e| e.to_string())?;
    slab_hausdorff(&scn, plan.knots()).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = runHeatmap)]
pub fn run_heatmap_js(text: &str) -> Result<Heatmap, JsError> {
    heatmap(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fluxCurve)]
pub fn flux_curve_js(p: f64, eps_reg: f64, xi_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    flux_curve(p, eps_reg, xi_max, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = slabDistance)]
pub fn slab_distance_js(text: &str, n_slices: usize) -> Result<f64, JsError> {
    slab_distance(text, n_slices).map_err(|e| JsError::new(&e))
}
