//! Merge run records into the zero-shot and one-shot comparison tables.

use std::path::{Path, PathBuf};

use super::{io_err, PipelineError, Result, RunRecord, RUN_RECORD};
use crate::api::{ReportFormat, ReportRequest, ReportResponse};
use crate::metrics::{Averaging, ReportRow, ReportTable, TableKind};

pub const BASELINE_PROMPT: &str = "Baseline";

const PROMPT_ORDER: [&str; 6] = ["Box", "Point", "Text", BASELINE_PROMPT, "PerSAM-F", "Text PerSAM-F"];

fn prompt_rank(p: &str) -> usize {
    PROMPT_ORDER.iter().position(|&q| q == p).unwrap_or(PROMPT_ORDER.len())
}

fn find_records(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    if !path.is_dir() {
        return Err(PipelineError::Validation(format!("{}: no such file or directory", path.display())));
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    children.sort();
    for c in children {
        if c.is_dir() {
            find_records(&c, out)?;
        } else if c.file_name().is_some_and(|n| n == RUN_RECORD) {
            out.push(c);
        }
    }
    Ok(())
}

/// Load every run record named by `paths`, searching directories recursively.
pub fn collect_records(paths: &[String]) -> Result<Vec<RunRecord>> {
    let mut files = Vec::new();
    for p in paths {
        find_records(Path::new(p), &mut files)?;
    }
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).map_err(|e| io_err(f, e))?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Validation(format!("{}: not a run record: {e}", f.display())))
        })
        .collect()
}

/// Order rows into the two tables. Zero-shot rows come first by dataset and
/// prompt. Each dataset with one-shot rows gets a baseline row copied from
/// its best zero-shot prompt by Dice.
pub fn arrange_rows(mut rows: Vec<ReportRow>) -> Vec<ReportRow> {
    rows.sort_by(|a, b| {
        (a.table, &a.dataset, prompt_rank(&a.prompt), &a.prompt).cmp(&(b.table, &b.dataset, prompt_rank(&b.prompt), &b.prompt))
    });
    let (zero, one): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.table == TableKind::ZeroShot);
    let mut out = zero.clone();
    let mut i = 0;
    while i < one.len() {
        let dataset = &one[i].dataset;
        let best = zero
            .iter()
            .filter(|r| &r.dataset == dataset)
            .max_by(|a, b| a.metrics.dice.total_cmp(&b.metrics.dice).then(prompt_rank(&b.prompt).cmp(&prompt_rank(&a.prompt))));
        if let Some(b) = best {
            out.push(ReportRow {
                table: TableKind::OneShot,
                prompt: BASELINE_PROMPT.into(),
                ..b.clone()
            });
        }
        while i < one.len() && &one[i].dataset == dataset {
            out.push(one[i].clone());
            i += 1;
        }
    }
    out
}

pub fn cmd_report(req: &ReportRequest) -> Result<ReportResponse> {
    if req.records.is_empty() {
        return Err(PipelineError::Validation("no run records given".into()));
    }
    let records = collect_records(&req.records)?;
    if records.is_empty() {
        return Err(PipelineError::Validation("no run records found".into()));
    }
    let averaging = match req.averaging {
        Some(a) => a,
        None => {
            let first = records[0].averaging;
            if records.iter().any(|r| r.averaging != first && !r.rows.is_empty()) {
                return Err(PipelineError::Validation(
                    "run records mix macro and pooled class averaging".into(),
                ));
            }
            first
        }
    };
    if req.averaging.is_some_and(|a| records.iter().any(|r| r.averaging != a && !r.rows.is_empty())) {
        return Err(PipelineError::Validation(format!(
            "requested {} averaging but some records used another",
            match averaging {
                Averaging::Macro => "macro",
                Averaging::Pooled => "pooled",
            }
        )));
    }
    let rows = arrange_rows(records.into_iter().flat_map(|r| r.rows).collect());
    let table = ReportTable::new(rows, averaging);
    let content = match req.format {
        ReportFormat::Csv => table.to_csv(),
        ReportFormat::Json => table.to_json(),
        ReportFormat::Text => table.to_text(),
    };
    Ok(ReportResponse {
        format: req.format,
        content,
    })
}
