//! Pixelwise evaluation: confusion counts, the five segmentation metrics,
//! one-against-all multiclass decomposition and mean ± std aggregation.

mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{BinaryMask, LabelRaster};

pub use report::{format_cell, mark_best, ReportRow, ReportTable, TableKind, BEST_MARK, CSV_HEADER};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {0} does not occur in the label raster")]
    EmptyClass(u32),
    #[error("no rows to aggregate")]
    NoRows,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// A metric value; `degenerate` marks a zero denominator resolved by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

impl Metric {
    fn ratio(num: u64, den: u64, empty: f64) -> Self {
        if den == 0 {
            Self {
                value: empty,
                degenerate: true,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask, valid: Option<&BinaryMask>) -> Result<ConfusionCounts> {
    let check = |m: &BinaryMask, what: &str| {
        if m.same_shape(gt) {
            Ok(())
        } else {
            Err(MetricsError::Shape(format!(
                "{what} is {}x{}, ground truth is {}x{}",
                m.width(),
                m.height(),
                gt.width(),
                gt.height()
            )))
        }
    };
    check(pred, "prediction")?;
    if let Some(v) = valid {
        check(v, "valid mask")?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if valid.is_some_and(|v| !v.data()[i]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn iou(c: &ConfusionCounts) -> Metric {
    Metric::ratio(c.tp, c.tp + c.fp + c.fn_, 1.0)
}

pub fn pixel_accuracy(c: &ConfusionCounts) -> Metric {
    Metric::ratio(c.tp + c.tn, c.total(), 1.0)
}

pub fn dice(c: &ConfusionCounts) -> Metric {
    Metric::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0)
}

pub fn tpr(c: &ConfusionCounts) -> Metric {
    Metric::ratio(c.tp, c.tp + c.fn_, 1.0)
}

pub fn fpr(c: &ConfusionCounts) -> Metric {
    Metric::ratio(c.fp, c.fp + c.tn, 0.0)
}

/// The five metrics in report column order.
pub const METRIC_NAMES: [&str; 5] = ["dice", "iou", "pixel_acc", "tpr", "fpr"];

/// One evaluation row: values in report order plus optional per-metric std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dice: f64,
    pub iou: f64,
    pub pixel_acc: f64,
    pub tpr: f64,
    pub fpr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<[f64; 5]>,
    /// Any metric fell back to a zero-denominator convention.
    #[serde(default)]
    pub degenerate: bool,
}

impl MetricRow {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let m = [dice(c), iou(c), pixel_accuracy(c), tpr(c), fpr(c)];
        Self {
            dice: m[0].value,
            iou: m[1].value,
            pixel_acc: m[2].value,
            tpr: m[3].value,
            fpr: m[4].value,
            std: None,
            degenerate: m.iter().any(|v| v.degenerate),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.iou, self.pixel_acc, self.tpr, self.fpr]
    }

    fn from_values(v: [f64; 5], std: Option<[f64; 5]>, degenerate: bool) -> Self {
        Self {
            dice: v[0],
            iou: v[1],
            pixel_acc: v[2],
            tpr: v[3],
            fpr: v[4],
            std,
            degenerate,
        }
    }
}

/// Per-metric arithmetic mean and population standard deviation.
pub fn aggregate(rows: &[MetricRow]) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(MetricsError::NoRows);
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; 5];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 5];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    Ok(MetricRow::from_values(
        mean,
        Some(var.map(f64::sqrt)),
        rows.iter().any(|r| r.degenerate),
    ))
}

/// Binary ground truth for one class plus the mask of labelled (nonzero) pixels.
pub fn one_against_all(gt: &LabelRaster, class_id: u32) -> Result<(BinaryMask, BinaryMask)> {
    if class_id == 0 || !gt.data().contains(&class_id) {
        return Err(MetricsError::EmptyClass(class_id));
    }
    Ok((gt.mask_of(class_id), gt.nonzero()))
}

/// How per-class results combine into one multiclass row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of per-class metrics.
    #[default]
    Macro,
    /// Metrics of summed confusion counts.
    Pooled,
}

/// Combine per-class confusion counts into one row.
pub fn multiclass_row(per_class: &[ConfusionCounts], mode: Averaging) -> Result<MetricRow> {
    if per_class.is_empty() {
        return Err(MetricsError::NoRows);
    }
    match mode {
        Averaging::Pooled => {
            let total = per_class.iter().copied().fold(ConfusionCounts::default(), |a, b| a + b);
            Ok(MetricRow::from_counts(&total))
        }
        Averaging::Macro => {
            let rows: Vec<MetricRow> = per_class.iter().map(MetricRow::from_counts).collect();
            let mut row = aggregate(&rows)?;
            row.std = None;
            Ok(row)
        }
    }
}
