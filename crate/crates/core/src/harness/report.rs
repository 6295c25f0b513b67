//! CSV and JSON run reports.
//!
//! CSV floats are written with 17 significant digits so they parse back to
//! the identical f64. Per-step errors only appear in JSON.

use std::io::{Read, Write};

use super::pipeline::{ReportRow, RunReport};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = [
    "policy",
    "layer",
    "head",
    "budget",
    "mean_err",
    "max_err",
    "kept",
    "peak_entries",
    "score_ms",
];

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(offset, e.to_string())
}

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_report_csv<W: Write>(report: &RunReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.policy.name().to_string(),
            r.layer.to_string(),
            r.head.to_string(),
            r.budget.to_string(),
            float(r.mean_err),
            float(r.max_err),
            r.kept.to_string(),
            r.peak_entries.to_string(),
            float(r.score_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(input: R) -> Result<RunReport> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::format(0, "unexpected report header"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let int = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|e| Error::format(offset, format!("column {}: {e}", CSV_HEADER[i])))
        };
        let real = |i: usize| {
            field(i)
                .parse::<f64>()
                .map_err(|e| Error::format(offset, format!("column {}: {e}", CSV_HEADER[i])))
        };
        rows.push(ReportRow {
            policy: field(0)
                .parse()
                .map_err(|e: Error| Error::format(offset, e.to_string()))?,
            layer: int(1)?,
            head: int(2)?,
            budget: int(3)?,
            mean_err: real(4)?,
            max_err: real(5)?,
            kept: int(6)?,
            peak_entries: int(7)?,
            score_ms: real(8)?,
            step_errors: Vec::new(),
        });
    }
    Ok(RunReport { rows })
}

pub fn write_report_json<W: Write>(report: &RunReport, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, report).map_err(|e| Error::format(0, e.to_string()))
}

pub fn read_report_json<R: Read>(input: R) -> Result<RunReport> {
    serde_json::from_reader(input).map_err(|e| Error::format(0, e.to_string()))
}
