use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Averaging, MetricRow, METRIC_NAMES};

pub const CSV_HEADER: [&str; 9] = [
    "platform", "target", "resolution", "prompt", "dice", "iou", "pixel_acc", "tpr", "fpr",
];

const TEXT_HEADER: [&str; 9] = [
    "Platform", "Target", "Resolution", "Prompt", "Dice", "IoU", "Pixel Acc.", "TPR", "FPR",
];

/// Suffix appended to the best value of a metric within a dataset.
pub const BEST_MARK: &str = "*";

/// `0.945` or `0.945 ± 0.042`.
pub fn format_cell(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.3} ± {s:.3}"),
        None => format!("{mean:.3}"),
    }
}

/// Which comparison a row belongs to: zero-shot prompts or one-shot protocols.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    #[default]
    ZeroShot,
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Manifest entry id; rows sharing it and `table` compete for the best marks.
    pub dataset: String,
    #[serde(default)]
    pub table: TableKind,
    pub platform: String,
    pub target: String,
    pub resolution: String,
    pub prompt: String,
    pub metrics: MetricRow,
}

impl ReportRow {
    fn cells(&self, best: &[bool; 5]) -> Vec<String> {
        let std = self.metrics.std;
        let mut out = vec![
            self.platform.clone(),
            self.target.clone(),
            self.resolution.clone(),
            self.prompt.clone(),
        ];
        for (k, v) in self.metrics.values().into_iter().enumerate() {
            let mut cell = format_cell(v, std.map(|s| s[k]));
            if best[k] {
                cell.push_str(BEST_MARK);
            }
            out.push(cell);
        }
        out
    }
}

/// Best flags per row and metric. Higher is better except for FPR; the
/// comparison uses the three-decimal values that are printed, so equal
/// printed values share the mark.
pub fn mark_best(rows: &[ReportRow]) -> Vec<[bool; 5]> {
    let rounded = |v: f64| (v * 1000.0).round() as i64;
    let mut groups: BTreeMap<(&str, TableKind), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry((&r.dataset, r.table)).or_default().push(i);
    }
    let mut flags = vec![[false; 5]; rows.len()];
    for members in groups.values() {
        for k in 0..5 {
            let key = |i: usize| {
                let v = rounded(rows[i].metrics.values()[k]);
                if k == 4 {
                    -v
                } else {
                    v
                }
            };
            let best = members.iter().map(|&i| key(i)).max().expect("non-empty group");
            for &i in members {
                flags[i][k] = key(i) == best;
            }
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    pub averaging: Averaging,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    #[serde(flatten)]
    row: &'a ReportRow,
    best: Vec<&'static str>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    columns: [&'static str; 9],
    averaging: Averaging,
    std: &'static str,
    rows: Vec<JsonRow<'a>>,
}

impl ReportTable {
    pub fn new(rows: Vec<ReportRow>, averaging: Averaging) -> Self {
        Self { rows, averaging }
    }

    pub fn to_csv(&self) -> String {
        let flags = mark_best(&self.rows);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for (row, best) in self.rows.iter().zip(&flags) {
            w.write_record(row.cells(best)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    /// CSV without best marks, for a single run's own metrics file.
    pub fn to_plain_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.cells(&[false; 5])).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_json(&self) -> String {
        let flags = mark_best(&self.rows);
        let report = JsonReport {
            columns: CSV_HEADER,
            averaging: self.averaging,
            std: "population",
            rows: self
                .rows
                .iter()
                .zip(&flags)
                .map(|(row, best)| JsonRow {
                    row,
                    best: (0..5).filter(|&k| best[k]).map(|k| METRIC_NAMES[k]).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&report).expect("report serializes")
    }

    /// Aligned plain-text table, one line per row.
    pub fn to_text(&self) -> String {
        let flags = mark_best(&self.rows);
        let mut table: Vec<Vec<String>> = vec![TEXT_HEADER.iter().map(|s| s.to_string()).collect()];
        table.extend(self.rows.iter().zip(&flags).map(|(r, b)| r.cells(b)));
        let widths: Vec<usize> = (0..9)
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if c < 4 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(
            out,
            "({} averaging over classes; std is the population standard deviation; {BEST_MARK} marks the best value per dataset)",
            match self.averaging {
                Averaging::Macro => "macro",
                Averaging::Pooled => "pooled",
            }
        );
        out
    }
}
