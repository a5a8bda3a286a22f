//! Evaluation metrics for dual-view gaze predictions.
//!
//! All values are radians. Means are plain left-to-right sums over samples so
//! a one-pass metric equals the mean of its per-sample values exactly.

use serde::{Deserialize, Serialize};

use crate::geometry::{angle_between, head_angle, rotation_from_euler, to_head_cs, wrap_angle, UnitVec3};
use crate::losses::View;
use crate::model::Prediction;
use crate::simdata::{HiddenLabels, ViewLabels};
use crate::Error;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Threshold below which the summed head-frame gazes are considered to cancel.
pub const DEGENERATE_SUM_NORM: f64 = 1e-9;

/// Default head-angle bin edges, degrees.
pub const DEFAULT_BIN_EDGES_DEG: [f64; 7] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0];

/// Whether Dual-S/Dual-A use predicted or labeled head poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Predicted,
    Label,
}

pub type PairPrediction = [Prediction; 2];

fn check(preds: &[PairPrediction], labels: &[HiddenLabels]) -> Result<(), Error> {
    if preds.is_empty() {
        return Err(Error::Empty("no samples to evaluate"));
    }
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: preds.len(),
        });
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        s += v;
        n += 1;
    }
    s / n as f64
}

/// Gaze error of each view of one sample.
pub fn view_errors(p: &PairPrediction, l: &HiddenLabels) -> [f64; 2] {
    [
        angle_between(&p[0].gaze, &l.views[0].gaze),
        angle_between(&p[1].gaze, &l.views[1].gaze),
    ]
}

/// Mean single-view error over both views of every sample.
pub fn mono_error(preds: &[PairPrediction], labels: &[HiddenLabels]) -> Result<f64, Error> {
    check(preds, labels)?;
    Ok(mean(preds.iter().zip(labels).flat_map(|(p, l)| view_errors(p, l))))
}

/// View with the smaller head angle; ties go to view 1.
pub fn selected_view(p: &PairPrediction, l: &HiddenLabels, mode: SelectionMode) -> View {
    let (t1, t2) = match mode {
        SelectionMode::Predicted => (head_angle(&p[0].pose), head_angle(&p[1].pose)),
        SelectionMode::Label => (l.views[0].head_angle, l.views[1].head_angle),
    };
    if t1 <= t2 {
        View::First
    } else {
        View::Second
    }
}

/// Per-sample Dual-S error and the view it came from.
pub fn dual_s_per_sample(preds: &[PairPrediction], labels: &[HiddenLabels], mode: SelectionMode) -> Vec<(f64, View)> {
    preds
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let v = selected_view(p, l, mode);
            (view_errors(p, l)[v.index()], v)
        })
        .collect()
}

pub fn dual_s_error(preds: &[PairPrediction], labels: &[HiddenLabels], mode: SelectionMode) -> Result<f64, Error> {
    check(preds, labels)?;
    Ok(mean(dual_s_per_sample(preds, labels, mode).into_iter().map(|(e, _)| e)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualAResult {
    pub error: f64,
    /// Samples whose head-frame gazes cancelled; each contributed pi.
    pub degenerate: usize,
}

/// Error of one sample's averaged head-frame gaze, or `None` if degenerate.
pub fn dual_a_sample(p: &PairPrediction, l: &HiddenLabels, mode: SelectionMode) -> Option<f64> {
    let poses = match mode {
        SelectionMode::Predicted => [p[0].pose, p[1].pose],
        SelectionMode::Label => [l.views[0].pose, l.views[1].pose],
    };
    let h1 = rotation_from_euler(&poses[0]).matrix().tr_mul_vec(&p[0].gaze.vec());
    let h2 = rotation_from_euler(&poses[1]).matrix().tr_mul_vec(&p[1].gaze.vec());
    let avg = (h1 + h2).try_normalize(DEGENERATE_SUM_NORM)?;
    Some(angle_between(&avg, &label_head_gaze(&l.views[0])))
}

fn label_head_gaze(v: &ViewLabels) -> UnitVec3 {
    to_head_cs(&rotation_from_euler(&v.pose), &v.gaze)
}

pub fn dual_a_error(preds: &[PairPrediction], labels: &[HiddenLabels], mode: SelectionMode) -> Result<DualAResult, Error> {
    check(preds, labels)?;
    let mut degenerate = 0;
    let error = mean(preds.iter().zip(labels).map(|(p, l)| {
        dual_a_sample(p, l, mode).unwrap_or_else(|| {
            degenerate += 1;
            std::f64::consts::PI
        })
    }));
    Ok(DualAResult { error, degenerate })
}

/// Mean wrapped absolute angle error over samples, views and the three angles.
pub fn hpose_error(preds: &[PairPrediction], labels: &[HiddenLabels]) -> Result<f64, Error> {
    check(preds, labels)?;
    Ok(mean(preds.iter().zip(labels).flat_map(|(p, l)| {
        (0..2).flat_map(move |v| {
            let a = p[v].pose.as_array();
            let b = l.views[v].pose.as_array();
            (0..3).map(move |k| wrap_angle(a[k] - b[k]).abs())
        })
    })))
}

/// Mean angle between the two views' head-frame gazes. Uses predictions only.
pub fn consistency(preds: &[PairPrediction]) -> Result<f64, Error> {
    if preds.is_empty() {
        return Err(Error::Empty("no samples to evaluate"));
    }
    Ok(mean(preds.iter().map(|p| crate::losses::pair_consistency(&p[0], &p[1]))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo_deg: f64,
    pub hi_deg: f64,
    /// Views whose label head angle falls in the bin.
    pub count: usize,
    /// `None` when the bin is empty.
    pub mono: Option<f64>,
    /// Samples whose Dual-S selected view falls in the bin.
    pub dual_s_count: usize,
    pub dual_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub rows: Vec<BinRow>,
    /// Views outside every bin.
    pub unbinned: usize,
}

/// Bin index of `theta` (radians) for edges in degrees. Bins are `[lo, hi)`
/// except the last, which includes its upper edge.
pub fn bin_index(theta: f64, edges_deg: &[f64]) -> Option<usize> {
    let d = theta.to_degrees();
    let last = edges_deg.len().checked_sub(2)?;
    (0..=last).find(|&i| d >= edges_deg[i] && (d < edges_deg[i + 1] || (i == last && d <= edges_deg[i + 1])))
}

pub fn validate_edges(edges_deg: &[f64]) -> Result<(), Error> {
    if edges_deg.len() < 2 {
        return Err(Error::InvalidConfig("need at least two bin edges".into()));
    }
    if edges_deg.iter().any(|e| !e.is_finite()) || edges_deg.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("bin edges must be finite and strictly increasing".into()));
    }
    Ok(())
}

pub fn bin_by_head_angle(
    preds: &[PairPrediction],
    labels: &[HiddenLabels],
    edges_deg: &[f64],
    mode: SelectionMode,
) -> Result<BinTable, Error> {
    check(preds, labels)?;
    validate_edges(edges_deg)?;
    let nb = edges_deg.len() - 1;
    let mut mono = vec![(0usize, 0.0f64); nb];
    let mut dual = vec![(0usize, 0.0f64); nb];
    let mut unbinned = 0;
    for (p, l) in preds.iter().zip(labels) {
        let errs = view_errors(p, l);
        for v in 0..2 {
            match bin_index(l.views[v].head_angle, edges_deg) {
                Some(b) => {
                    mono[b].0 += 1;
                    mono[b].1 += errs[v];
                }
                None => unbinned += 1,
            }
        }
        let sel = selected_view(p, l, mode).index();
        if let Some(b) = bin_index(l.views[sel].head_angle, edges_deg) {
            dual[b].0 += 1;
            dual[b].1 += errs[sel];
        }
    }
    let avg = |(n, s): (usize, f64)| if n == 0 { None } else { Some(s / n as f64) };
    let rows = (0..nb)
        .map(|b| BinRow {
            lo_deg: edges_deg[b],
            hi_deg: edges_deg[b + 1],
            count: mono[b].0,
            mono: avg(mono[b]),
            dual_s_count: dual[b].0,
            dual_s: avg(dual[b]),
        })
        .collect();
    Ok(BinTable { rows, unbinned })
}

/// Binned table as CSV in degrees. Empty bins leave the error cell blank.
pub fn bins_csv(table: &BinTable) -> String {
    let mut out = String::from("lo_deg,hi_deg,count,mono_deg,dual_s_deg\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{:.2}", x.to_degrees())).unwrap_or_default();
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lo_deg,
            r.hi_deg,
            r.count,
            cell(r.mono),
            cell(r.dual_s)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub selection_mode: SelectionMode,
    pub mono: f64,
    pub dual_s: f64,
    pub dual_a: f64,
    pub dual_a_degenerate: usize,
    pub hpose: f64,
    pub consistency: f64,
    pub bins: BinTable,
}

pub fn metric_report(
    preds: &[PairPrediction],
    labels: &[HiddenLabels],
    mode: SelectionMode,
    edges_deg: &[f64],
) -> Result<MetricReport, Error> {
    let dual_a = dual_a_error(preds, labels, mode)?;
    Ok(MetricReport {
        samples: preds.len(),
        selection_mode: mode,
        mono: mono_error(preds, labels)?,
        dual_s: dual_s_error(preds, labels, mode)?,
        dual_a: dual_a.error,
        dual_a_degenerate: dual_a.degenerate,
        hpose: hpose_error(preds, labels)?,
        consistency: consistency(preds)?,
        bins: bin_by_head_angle(preds, labels, edges_deg, mode)?,
    })
}

/// Relative change in percent, negative when `after` is smaller.
pub fn relative_change_pct(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        if after == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (after - before) / before * 100.0
    }
}
