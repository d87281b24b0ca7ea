use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SweepSummary;
use crate::error::{Error, Result};
use crate::metrics::{AggregateRow, SSIM_WINDOW};

pub const CSV_HEADER: [&str; 10] = [
    "Technique",
    "Epoch",
    "Image",
    "PertLimit",
    "PSNR",
    "SSIM",
    "LPIPS_proxy",
    "MSE",
    "ASR",
    "RemovalRate",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    TextTable,
    Json,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::Csv,
        ReportFormat::TextTable,
        ReportFormat::Json,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "text" | "text-table" => Ok(Self::TextTable),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::TextTable => "txt",
            Self::Json => "json",
        }
    }
}

fn cells(r: &AggregateRow) -> [String; 10] {
    let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
    [
        r.technique.clone(),
        opt(r.epoch),
        opt(r.images),
        format!("{:.4}", r.pert_limit),
        format!("{:.4}", r.psnr),
        format!("{:.4}", r.ssim),
        format!("{:.4}", r.lpips_proxy),
        format!("{:.4}", r.mse),
        format!("{:.1}", r.asr),
        format!("{:.1}", r.removal_rate),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize)]
struct JsonReport<'a> {
    columns: [&'static str; 10],
    /// Rendered cells, identical to the CSV.
    table: Vec<[String; 10]>,
    rows: &'a [AggregateRow],
    ssim: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<&'a SweepSummary>,
}

fn ssim_note() -> String {
    format!("single-scale, {SSIM_WINDOW}x{SSIM_WINDOW} uniform window, stride 1, C1=0.01^2, C2=0.03^2, channel mean")
}

/// Render rows deterministically. Empty input is an error.
pub fn render(
    rows: &[AggregateRow],
    format: ReportFormat,
    sweep: Option<&SweepSummary>,
) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no result rows to report".into()));
    }
    let table: Vec<[String; 10]> = rows.iter().map(cells).collect();
    Ok(match format {
        ReportFormat::Csv => {
            let mut s = CSV_HEADER.join(",");
            s.push('\n');
            for row in &table {
                s.push_str(
                    &row.iter()
                        .map(|c| csv_field(c))
                        .collect::<Vec<_>>()
                        .join(","),
                );
                s.push('\n');
            }
            s
        }
        ReportFormat::TextTable => {
            let mut widths: Vec<usize> = CSV_HEADER.iter().map(|h| h.len()).collect();
            for row in &table {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.len().max(1));
                }
            }
            let line = |cols: Vec<&str>| {
                let parts: Vec<String> = cols
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, &w))| {
                        let c = if c.is_empty() { "-" } else { c };
                        if i == 0 {
                            format!("{c:<w$}")
                        } else {
                            format!("{c:>w$}")
                        }
                    })
                    .collect();
                parts.join("  ").trim_end().to_string()
            };
            let mut s = line(CSV_HEADER.to_vec());
            s.push('\n');
            s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            s.push('\n');
            for row in &table {
                s.push_str(&line(row.iter().map(String::as_str).collect()));
                s.push('\n');
            }
            s.push_str(&format!("\nSSIM: {}\n", ssim_note()));
            if let Some(sw) = sweep {
                s.push_str(&format!("Sweep axis: {:?}\n", sw.axis));
                for (t, v) in &sw.optimum {
                    s.push_str(&format!("Optimum for {t}: {v}\n"));
                }
            }
            s
        }
        ReportFormat::Json => {
            let doc = JsonReport {
                columns: CSV_HEADER,
                table,
                rows,
                ssim: ssim_note(),
                sweep,
            };
            let mut s =
                serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
            s.push('\n');
            s
        }
    })
}

/// Write every format as `<stem>.<ext>` under `dir`.
pub fn write_reports(
    dir: &Path,
    stem: &str,
    rows: &[AggregateRow],
    sweep: Option<&SweepSummary>,
) -> Result<Vec<(ReportFormat, PathBuf)>> {
    let mut out = Vec::new();
    for f in ReportFormat::ALL {
        let path = dir.join(format!("{stem}.{}", f.extension()));
        std::fs::write(&path, render(rows, f, sweep)?).map_err(|source| Error::Unwritable {
            path: path.clone(),
            source,
        })?;
        out.push((f, path));
    }
    Ok(out)
}
