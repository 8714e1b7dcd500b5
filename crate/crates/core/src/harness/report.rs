//! Rendering of run reports as a comparison table.

use std::fmt::Write as _;

use super::RunReport;
use crate::metrics::{percent, MetricSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "table" => Ok(Self::Table),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

const HEADER: [&str; 13] = [
    "run", "method", "AVG EFR", "AVG UKR", "AVG OKR", "AVG CSR", "AVG KG", "AVG OEC", "UKR@T", "OKR@T", "CSR@T",
    "KG@T", "OEC@T",
];

fn row(r: &RunReport) -> Vec<String> {
    let a: &MetricSummary = &r.aggregate.avg;
    let l: &MetricSummary = &r.aggregate.last;
    let offline = r.method == crate::refiners::Method::Offline;
    // the offline reference has a single final evaluation; averages are meaningless
    let avg = |v| if offline { "-".to_string() } else { percent(v) };
    vec![
        r.run_id.clone(),
        r.method.to_string(),
        if offline { percent(l.efr) } else { percent(a.efr) },
        avg(a.ukr),
        avg(a.okr),
        avg(a.csr),
        avg(a.kg),
        avg(a.oec),
        percent(l.ukr),
        percent(l.okr),
        percent(l.csr),
        percent(l.kg),
        percent(l.oec),
    ]
}

/// Renders reports (already sorted by the caller) as percentages with two
/// decimals, in the requested format.
pub fn render_reports(reports: &[RunReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports).expect("reports serialize") + "\n",
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(HEADER).expect("in-memory csv");
            for r in reports {
                w.write_record(row(r)).expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
        }
        ReportFormat::Table => {
            let rows: Vec<Vec<String>> = reports.iter().map(row).collect();
            let mut widths: Vec<usize> = HEADER.iter().map(|h| h.len()).collect();
            for r in &rows {
                for (w, cell) in widths.iter_mut().zip(r) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut out = String::new();
            let line = |cells: Vec<String>, out: &mut String| {
                let parts: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                writeln!(out, "{}", parts.join(" | ").trim_end()).expect("string write");
            };
            line(HEADER.iter().map(|s| s.to_string()).collect(), &mut out);
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            writeln!(out, "{}", rule.join("-+-")).expect("string write");
            for r in rows {
                line(r, &mut out);
            }
            out
        }
    }
}
