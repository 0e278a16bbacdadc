//! Report rows, CSV serialization, and the run manifest.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::Experiment;
use super::HarnessError;
use crate::SCHEMA_VERSION;

pub const TOOL_NAME: &str = "tightci";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One aggregated grid cell. Fields that do not apply to an experiment are
/// left empty in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub schema_version: u32,
    pub experiment: String,
    pub method: String,
    pub scheme: String,
    pub setting: String,
    pub n: usize,
    pub n1: Option<usize>,
    pub pi: f64,
    pub alpha: Option<f64>,
    pub coverage_rate: Option<f64>,
    pub coverage_se: Option<f64>,
    pub mean_halfwidth: Option<f64>,
    pub width_times_sqrt_npi: Option<f64>,
    pub mean_lower_margin: Option<f64>,
    pub mean_upper_margin: Option<f64>,
    pub rmse: Option<f64>,
    pub rmse_bound: Option<f64>,
    pub replications: Option<usize>,
    pub seed: Option<u64>,
}

/// Row of the exact (or approximate) assignment-law table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub schema_version: u32,
    pub n: usize,
    pub n1: usize,
    /// `exact` for full enumeration, `monte-carlo` for the sampled check.
    pub method: String,
    pub assignment: String,
    pub count: u64,
    pub total: u64,
    /// `count/total` in lowest terms for exact rows.
    pub probability: String,
    pub expected: String,
    pub equal: Option<bool>,
    pub chi_square: Option<f64>,
    pub degrees_of_freedom: Option<u64>,
    pub p_value: Option<f64>,
}

/// A grid cell left out of the report, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCell {
    pub method: String,
    pub scheme: String,
    pub n: usize,
    pub pi: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub experiment: Experiment,
    pub rows: Vec<ReportRow>,
    pub equivalence: Vec<EquivalenceRow>,
    pub skipped: Vec<SkippedCell>,
}

impl Report {
    pub fn file_name(&self) -> String {
        format!("{}.csv", self.experiment.as_str())
    }

    /// CSV bytes: header plus one line per row.
    pub fn to_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.experiment == Experiment::Equivalence {
            for r in &self.equivalence {
                w.serialize(r).map_err(runtime)?;
            }
            if self.equivalence.is_empty() {
                w.write_record(EQUIVALENCE_HEADER).map_err(runtime)?;
            }
        } else {
            for r in &self.rows {
                w.serialize(r).map_err(runtime)?;
            }
            if self.rows.is_empty() {
                w.write_record(REPORT_HEADER).map_err(runtime)?;
            }
        }
        w.into_inner()
            .map_err(|e| HarnessError::Runtime(e.to_string()))
    }

    /// Writes `<experiment>.csv` and `manifest.json` into `dir`.
    pub fn write_outputs(
        &self,
        dir: &Path,
        config_bytes: &[u8],
        seed: u64,
    ) -> Result<Manifest, HarnessError> {
        let csv = self.to_csv()?;
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let file = self.file_name();
        let path = dir.join(&file);
        fs::write(&path, &csv).map_err(|e| io(&path, e))?;
        let manifest = Manifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            schema_version: SCHEMA_VERSION,
            experiment: self.experiment.as_str().into(),
            seed,
            config_sha256: sha256_hex(config_bytes),
            outputs: vec![OutputFile {
                rows: if self.experiment == Experiment::Equivalence {
                    self.equivalence.len()
                } else {
                    self.rows.len()
                },
                sha256: sha256_hex(&csv),
                file,
            }],
            skipped: self.skipped.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
        text.push('\n');
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, text).map_err(|e| io(&mpath, e))?;
        Ok(manifest)
    }
}

const REPORT_HEADER: [&str; 19] = [
    "schema_version",
    "experiment",
    "method",
    "scheme",
    "setting",
    "n",
    "n1",
    "pi",
    "alpha",
    "coverage_rate",
    "coverage_se",
    "mean_halfwidth",
    "width_times_sqrt_npi",
    "mean_lower_margin",
    "mean_upper_margin",
    "rmse",
    "rmse_bound",
    "replications",
    "seed",
];

const EQUIVALENCE_HEADER: [&str; 13] = [
    "schema_version",
    "n",
    "n1",
    "method",
    "assignment",
    "count",
    "total",
    "probability",
    "expected",
    "equal",
    "chi_square",
    "degrees_of_freedom",
    "p_value",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
    pub rows: usize,
}

/// Provenance record written next to every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub config_sha256: String,
    pub outputs: Vec<OutputFile>,
    pub skipped: Vec<SkippedCell>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn runtime(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("{}: {e}", path.display()))
}
