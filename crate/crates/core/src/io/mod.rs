//! Scenario files, frame output and report serialization.

mod frames;
mod scenario;

pub use frames::{
    fmt_real, read_frame, read_manifest, scenario_hash, write_frames, FrameRow, Manifest,
    ManifestFrame,
};
pub use scenario::{load_scenario, parse_scenario, print_scenario, Issue, ScenarioError};

/// Pretty JSON with a trailing newline.
pub fn report_json<T: serde::Serialize>(report: &T) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize") + "\n"
}
