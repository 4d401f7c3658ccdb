//! CSV, JSON and SVG renderings of evaluation results.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::relative_reduction;
use super::pipeline::{PipelineReport, BASELINE};
use super::sweep::{PerDomain, SweepReport, SweepRow};
use crate::corpus::Domain;
use crate::error::{Error, Result};

/// One line of the results table. Empty `ratio`/`seed` cells mean the
/// column does not apply; `rel_reduction` is a percentage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub system: String,
    pub domain: String,
    pub ratio: Option<f64>,
    pub seed: Option<String>,
    pub wer: f64,
    pub rel_reduction: Option<f64>,
}

fn domain_label(d: Option<Domain>) -> String {
    d.map_or("all", Domain::label).to_string()
}

const DOMAINS: [Option<Domain>; 3] = [None, Some(Domain::A), Some(Domain::B)];

/// Rows for a pipeline evaluation; reductions are relative to `BS`.
pub fn pipeline_rows(report: &PipelineReport) -> Vec<CsvRow> {
    report
        .results
        .iter()
        .map(|r| CsvRow {
            system: r.system.clone(),
            domain: domain_label(r.domain),
            ratio: None,
            seed: None,
            wer: r.report.wer,
            rel_reduction: report
                .wer(BASELINE, r.domain)
                .and_then(|b| relative_reduction(b, r.report.wer).ok()),
        })
        .collect()
}

fn sweep_row_rows(system: &str, row: &SweepRow, baseline: &PerDomain, out: &mut Vec<CsvRow>) {
    for d in DOMAINS {
        for run in &row.runs {
            if let Some(w) = run.wer.get(d) {
                out.push(CsvRow {
                    system: system.to_string(),
                    domain: domain_label(d),
                    ratio: Some(row.ratio),
                    seed: Some(run.seed.to_string()),
                    wer: w,
                    rel_reduction: baseline.get(d).and_then(|b| relative_reduction(b, w).ok()),
                });
            }
        }
        if let Some(w) = row.mean_wer.get(d) {
            out.push(CsvRow {
                system: system.to_string(),
                domain: domain_label(d),
                ratio: Some(row.ratio),
                seed: Some("mean".into()),
                wer: w,
                rel_reduction: row.rel_reduction.get(d),
            });
        }
    }
}

/// Rows for a sweep: every run plus a `mean` row per ratio and domain,
/// reductions relative to the r=0 mean.
pub fn sweep_rows(report: &SweepReport) -> Vec<CsvRow> {
    let mut out = Vec::new();
    for d in DOMAINS {
        if let Some(w) = report.first_pass_wer.get(d) {
            out.push(CsvRow {
                system: BASELINE.into(),
                domain: domain_label(d),
                ratio: None,
                seed: None,
                wer: w,
                rel_reduction: None,
            });
        }
    }
    let Some(baseline) = report.rows.first().map(|r| r.mean_wer) else {
        return out;
    };
    for row in &report.rows {
        sweep_row_rows("BS+RS", row, &baseline, &mut out);
    }
    for row in &report.empirical_rows {
        sweep_row_rows("BS+RS(empirical)", row, &baseline, &mut out);
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Line chart of mean relative reduction against mixing ratio, one line
/// per domain.
pub fn sweep_svg(report: &SweepReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    let series: Vec<(&str, &str, Vec<(f64, f64)>)> = [
        (None, "all", "#444444"),
        (Some(Domain::A), "A", "#1f77b4"),
        (Some(Domain::B), "B", "#d62728"),
    ]
    .into_iter()
    .map(|(d, label, colour)| {
        let pts = report
            .rows
            .iter()
            .filter_map(|r| r.rel_reduction.get(d).map(|v| (r.ratio, v)))
            .collect();
        (label, colour, pts)
    })
    .filter(|(_, _, p): &(_, _, Vec<_>)| !p.is_empty())
    .collect();

    let values = series.iter().flat_map(|(_, _, p)| p.iter().map(|&(_, v)| v));
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let pad = 0.1 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |r: f64| M + r * (W - 2.0 * M);
    let y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    let _ = writeln!(
        s,
        r##"<line x1="{M}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#999999" stroke-dasharray="4 3"/>"##,
        y(0.0),
        W - M
    );
    for r in report.rows.iter().map(|r| r.ratio) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{r}</text>"#,
            x(r),
            H - M + 18.0
        );
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            M - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">mixing ratio</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">relative WER reduction (%)</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, (label, colour, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(r, v)| format!("{:.1},{:.1}", x(r), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(r, v) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, x(r), y(v));
        }
        let ly = M + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{colour}">domain {label}</text>"#,
            W - M - 70.0
        );
    }
    s.push_str("</svg>\n");
    s
}
