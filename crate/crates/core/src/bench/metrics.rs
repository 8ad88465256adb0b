//! Evaluation metrics for posterior predictions and their JSON/CSV reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksgent::Summary;
use crate::tensor::Tensor;

/// Physical saturation range; values outside it are clipped before use.
pub const SATURATION_RANGE: (f64, f64) = (0.2, 0.8);

/// Smallest Euclidean distance from `truth` to any row of `predictions`.
pub fn min_l2_error(predictions: &Tensor, truth: &[f64]) -> Result<f64> {
    if predictions.rows() == 0 {
        return Err(Error::InvalidArgument(
            "min_l2_error needs at least one prediction".into(),
        ));
    }
    if predictions.cols() != truth.len() {
        return Err(Error::shape(
            "min_l2_error",
            truth.len(),
            predictions.cols(),
        ));
    }
    Ok(predictions
        .rows_iter()
        .map(|r| {
            r.iter()
                .zip(truth)
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Six population standard deviations of the pooled values.
    Pooled,
    /// The width of [`SATURATION_RANGE`], independent of the data.
    Saturation,
}

/// Normalizing length for field errors.
pub fn length_scale(values: &[f64], mode: ScaleMode) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "length_scale needs at least one value".into(),
        ));
    }
    match mode {
        ScaleMode::Saturation => Ok(SATURATION_RANGE.1 - SATURATION_RANGE.0),
        ScaleMode::Pooled => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Ok(6.0 * var.sqrt())
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "scale must be positive and finite, got {scale}"
        )))
    }
}

/// `mean(|pred − truth|) / scale`.
pub fn relative_error(pred: &[f64], truth: &[f64], scale: f64) -> Result<f64> {
    check_scale(scale)?;
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("relative_error", truth.len(), pred.len()));
    }
    let mae = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mae / scale)
}

/// Mean over columns of the per-column range across rows, divided by `scale`.
pub fn relative_variation(predictions: &Tensor, scale: f64) -> Result<f64> {
    check_scale(scale)?;
    if predictions.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "relative_variation needs at least 2 predictions, got {}",
            predictions.rows()
        )));
    }
    let d = predictions.cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in predictions.rows_iter() {
        for (j, &v) in r.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let total: f64 = lo.iter().zip(&hi).map(|(l, h)| h - l).sum();
    Ok(total / d as f64 / scale)
}

pub fn clip_saturation(s: &Tensor) -> Tensor {
    s.map(|v| v.clamp(SATURATION_RANGE.0, SATURATION_RANGE.1))
}

/// Where a report's numbers came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    /// Artifact name → SHA-256 of the checkpoint or array it was computed from.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: usize,
    /// Metrics that do not apply to a case are omitted rather than stored as NaN.
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub per_case: Vec<CaseMetrics>,
    pub summary: BTreeMap<String, Summary>,
    /// Scalars that describe the whole run, such as the length scale used.
    #[serde(default)]
    pub globals: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

impl MetricReport {
    /// Builds the report and its per-metric summaries; rejects non-finite values.
    pub fn new(
        label: impl Into<String>,
        per_case: Vec<CaseMetrics>,
        globals: BTreeMap<String, f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for c in &per_case {
            for (k, &v) in &c.values {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("metric {k} of case {}", c.case)));
                }
                columns.entry(k.clone()).or_default().push(v);
            }
        }
        if let Some((k, _)) = globals.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("global metric {k}")));
        }
        let summary = columns
            .into_iter()
            .map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
            .collect::<Result<_>>()?;
        Ok(Self {
            label: label.into(),
            per_case,
            summary,
            globals,
            provenance,
        })
    }

    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .per_case
            .iter()
            .flat_map(|c| c.values.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Values of one metric in case order, skipping cases where it is absent.
    pub fn column(&self, name: &str) -> Vec<f64> {
        self.per_case
            .iter()
            .filter_map(|c| c.values.get(name).copied())
            .collect()
    }

    /// One row per case; absent metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let names = self.metric_names();
        let mut out = String::from("case");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for c in &self.per_case {
            out.push_str(&c.case.to_string());
            for n in &names {
                out.push(',');
                if let Some(v) = c.values.get(n) {
                    out.push_str(&format!("{v:e}"));
                }
            }
            out.push('\n');
        }
        out
    }
}
