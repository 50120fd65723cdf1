//! Result files. Tables are CSV with a fixed header; traces and mirrors
//! are JSONL. Every row carries its schema version and the manifest hash.
//! Wall-clock time goes to a separate `timing.json` so the result files
//! themselves are reproducible byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const TOOL: &str = concat!("anisoperc ", env!("CARGO_PKG_VERSION"));

/// A CSV row type with a pinned header.
pub trait Row: Serialize {
    const SCHEMA: &'static str;
    const HEADER: &'static [&'static str];
}

/// JSONL envelope for result records.
#[derive(Debug, Serialize)]
pub struct Record<'a, T: Serialize> {
    pub schema: &'static str,
    pub kind: &'static str,
    pub tool: &'static str,
    pub manifest_sha256: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replica: Option<u64>,
    pub payload: T,
}

#[derive(Debug, Serialize)]
struct Timing<'a> {
    command: &'a str,
    wall_clock_seconds: f64,
    workers: usize,
}

pub struct OutputDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn csv<T: Row>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)?;
        w.write_record(T::HEADER)?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        self.written.push(path);
        Ok(())
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, records: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        for r in records {
            serde_json::to_writer(&mut w, &r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        self.written.push(path);
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, body)?;
        self.written.push(path);
        Ok(())
    }

    /// The wall-clock sidecar; never compared across runs.
    pub fn timing(&mut self, command: &str, seconds: f64, workers: usize) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(&Timing {
            command,
            wall_clock_seconds: seconds,
            workers,
        })
        .expect("timing serializes");
        self.text("timing.json", &(body + "\n"))
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SampleRow {
    pub schema: &'static str,
    pub manifest_sha256: String,
    pub p: f64,
    pub q: f64,
    pub replica: u64,
    pub stream: u64,
    pub origin_size: usize,
    pub max_size: usize,
    pub components: usize,
    /// One digit per axis: 1 if that axis spans or wraps.
    pub spans: String,
}

impl Row for SampleRow {
    const SCHEMA: &'static str = "sample.v1";
    const HEADER: &'static [&'static str] = &[
        "schema", "manifest_sha256", "p", "q", "replica", "stream", "origin_size", "max_size", "components", "spans",
    ];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExploreRow {
    pub schema: &'static str,
    pub manifest_sha256: String,
    pub p: f64,
    pub q: f64,
    pub replica: u64,
    pub outcome: String,
    pub steps: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub hooks: usize,
    pub max_layer: usize,
    pub trace_ok: bool,
    pub first_violation: String,
}

impl Row for ExploreRow {
    const SCHEMA: &'static str = "explore.v1";
    const HEADER: &'static [&'static str] = &[
        "schema", "manifest_sha256", "p", "q", "replica", "outcome", "steps", "accepted", "rejected", "hooks",
        "max_layer", "trace_ok", "first_violation",
    ];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExploreSummaryRow {
    pub schema: &'static str,
    pub manifest_sha256: String,
    pub p: f64,
    pub q: f64,
    pub qbar: f64,
    pub r: f64,
    pub runs: u64,
    pub died: u64,
    pub reached_boundary: u64,
    pub budget_exhausted: u64,
    pub window_exhausted: u64,
    pub steps: u64,
    /// Accepted edges over steps.
    pub eta_fraction: f64,
    pub trace_failures: u64,
}

impl Row for ExploreSummaryRow {
    const SCHEMA: &'static str = "explore_summary.v1";
    const HEADER: &'static [&'static str] = &[
        "schema", "manifest_sha256", "p", "q", "qbar", "r", "runs", "died", "reached_boundary", "budget_exhausted",
        "window_exhausted", "steps", "eta_fraction", "trace_failures",
    ];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CurveRow {
    pub schema: &'static str,
    pub manifest_sha256: String,
    pub p: f64,
    pub pc_minus_p: f64,
    pub qc: Option<f64>,
    pub qc_lo: Option<f64>,
    pub qc_hi: Option<f64>,
    pub bound_line: Option<f64>,
    pub bound_vacuous: Option<bool>,
    pub bound_holds: Option<bool>,
    pub ratio: Option<f64>,
    /// Interval overlaps the previous estimated row's, as a non-increasing
    /// curve requires.
    pub monotone_ok: Option<bool>,
    pub side: usize,
    pub samples: u64,
    pub method: String,
    pub surrogate: String,
    pub flag: String,
}

impl Row for CurveRow {
    const SCHEMA: &'static str = "qc_scan.v1";
    const HEADER: &'static [&'static str] = &[
        "schema", "manifest_sha256", "p", "pc_minus_p", "qc", "qc_lo", "qc_hi", "bound_line", "bound_vacuous",
        "bound_holds", "ratio", "monotone_ok", "side", "samples", "method", "surrogate", "flag",
    ];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FitRow {
    pub schema: &'static str,
    pub source_sha256: String,
    pub p_c: f64,
    pub psi: f64,
    pub psi_se: f64,
    pub intercept: f64,
    pub cov_intercept: f64,
    pub cov_cross: f64,
    pub cov_psi: f64,
    pub points: usize,
    pub weighted: bool,
    /// `p` values left out, `;`-separated.
    pub refused: String,
}

impl Row for FitRow {
    const SCHEMA: &'static str = "fit.v1";
    const HEADER: &'static [&'static str] = &[
        "schema", "source_sha256", "p_c", "psi", "psi_se", "intercept", "cov_intercept", "cov_cross", "cov_psi",
        "points", "weighted", "refused",
    ];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ResidualRow {
    pub schema: &'static str,
    pub source_sha256: String,
    pub p: f64,
    pub log_gap: f64,
    pub log_qc: f64,
    pub residual: f64,
}

impl Row for ResidualRow {
    const SCHEMA: &'static str = "fit_residuals.v1";
    const HEADER: &'static [&'static str] = &["schema", "source_sha256", "p", "log_gap", "log_qc", "residual"];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CheckRow {
    pub schema: &'static str,
    pub check: &'static str,
    pub d: Option<usize>,
    pub m: Option<usize>,
    pub p: Option<f64>,
    pub q: f64,
    pub p_c: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Row for CheckRow {
    const SCHEMA: &'static str = "check.v1";
    const HEADER: &'static [&'static str] = &["schema", "check", "d", "m", "p", "q", "p_c", "lhs", "rhs", "holds"];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EquivalenceRow {
    pub schema: &'static str,
    pub manifest_sha256: String,
    pub p: f64,
    pub q: f64,
    pub exact: bool,
    pub samples: u64,
    pub tv_distance: f64,
    pub noise_floor: f64,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Row for EquivalenceRow {
    const SCHEMA: &'static str = "equivalence.v1";
    const HEADER: &'static [&'static str] = &[
        "schema", "manifest_sha256", "p", "q", "exact", "samples", "tv_distance", "noise_floor", "chi_square", "dof",
        "p_value", "tolerance", "pass",
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn serde_header<T: Row + Default>() -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(T::default()).unwrap();
        let bytes = w.into_inner().unwrap();
        String::from_utf8(bytes).unwrap().lines().next().unwrap().to_string()
    }

    #[test]
    fn pinned_headers_match_field_order() {
        assert_eq!(serde_header::<SampleRow>(), SampleRow::HEADER.join(","));
        assert_eq!(serde_header::<ExploreRow>(), ExploreRow::HEADER.join(","));
        assert_eq!(serde_header::<ExploreSummaryRow>(), ExploreSummaryRow::HEADER.join(","));
        assert_eq!(serde_header::<CurveRow>(), CurveRow::HEADER.join(","));
        assert_eq!(serde_header::<FitRow>(), FitRow::HEADER.join(","));
        assert_eq!(serde_header::<ResidualRow>(), ResidualRow::HEADER.join(","));
        assert_eq!(serde_header::<CheckRow>(), CheckRow::HEADER.join(","));
        assert_eq!(serde_header::<EquivalenceRow>(), EquivalenceRow::HEADER.join(","));
    }
}
