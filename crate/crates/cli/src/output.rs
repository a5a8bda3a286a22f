//! File formats written by the commands. Each starts with `format_version`.

use std::io::Write;
use std::path::Path;

use dualview_core::eval::MetricReport;
use dualview_core::gradcheck::SuiteReport;
use dualview_core::simdata::RefinedFrame;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const TRAIN_LOG_FORMAT_VERSION: u32 = dualview_core::engine::LOG_FORMAT_VERSION;
pub const EVAL_FORMAT_VERSION: u32 = dualview_core::eval::REPORT_FORMAT_VERSION;
pub const REFINE_FORMAT_VERSION: u32 = 1;
pub const GRADCHECK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// The unlabeled adaptation pairs.
    Rig,
    /// Held-out pairs from the same rig.
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Pretrain,
    Adapt,
}

/// First line of a training log; one record per iteration follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogHeader {
    pub format_version: u32,
    pub kind: LogKind,
    pub iterations: usize,
    pub records: usize,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub initial_probe_consistency: Option<f64>,
    pub provenance: Value,
}

/// Headline metrics in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degrees {
    pub mono: f64,
    pub dual_s: f64,
    pub dual_a: f64,
    pub hpose: f64,
    pub consistency: f64,
}

impl Degrees {
    pub fn of(r: &MetricReport) -> Self {
        Degrees {
            mono: r.mono.to_degrees(),
            dual_s: r.dual_s.to_degrees(),
            dual_a: r.dual_a.to_degrees(),
            hpose: r.hpose.to_degrees(),
            consistency: r.consistency.to_degrees(),
        }
    }

    pub fn fields(&self) -> [(&'static str, f64); 5] {
        [
            ("mono", self.mono),
            ("dual_s", self.dual_s),
            ("dual_a", self.dual_a),
            ("hpose", self.hpose),
            ("consistency", self.consistency),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub degrees: Degrees,
    /// Full report in radians, including the binned table.
    pub radians: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    /// `untrained` or the checkpoint's SHA-256.
    pub model: String,
    pub predicted: ModeReport,
    pub label: ModeReport,
}

/// Relative change after vs before, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub predicted: Degrees,
    pub label: Degrees,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub split: Split,
    pub samples: usize,
    pub before: ModelReport,
    pub after: Option<ModelReport>,
    pub change_pct: Option<Deltas>,
    pub provenance: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub frames: usize,
    pub cameras: usize,
    pub spread_before: f64,
    pub spread_after: f64,
    pub reduction_pct: f64,
    pub max_abs_correction_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub format_version: u32,
    pub delta: f64,
    pub summary: RefineSummary,
    pub frames: Vec<RefinedFrame>,
    pub provenance: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub format_version: u32,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
    pub provenance: Value,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Header line followed by one JSON record per line.
pub fn write_log<R: Serialize>(path: &Path, header: &TrainLogHeader, records: &[R]) -> Result<(), CliError> {
    ensure_parent(path)?;
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut line = |v: String| writeln!(out, "{v}").map_err(|e| io_err(path, e));
    line(serde_json::to_string(header).map_err(|e| CliError::Io(e.to_string()))?)?;
    for r in records {
        line(serde_json::to_string(r).map_err(|e| CliError::Io(e.to_string()))?)?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_log<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<(TrainLogHeader, Vec<R>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header: TrainLogHeader = serde_json::from_str(lines.next().unwrap_or("")).map_err(|e| io_err(path, e))?;
    let records = lines
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(path, e)))
        .collect::<Result<Vec<R>, _>>()?;
    Ok((header, records))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
