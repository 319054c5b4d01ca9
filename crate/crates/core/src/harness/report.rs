use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Mean and population standard deviation (divide by `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `"62.0 (1.41)"` from percentages.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.1} ({std:.2})")
}

/// One row: all runs sharing dataset, model, binarization and algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub model: String,
    pub binarization: String,
    pub algorithm: String,
    pub runs: usize,
    pub failed: usize,
    /// Test accuracy in percent.
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub test_accuracy: String,
    /// Retained trace buffers, the measurable stand-in for activation memory.
    pub peak_buffer_mib: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds_mean: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReportOptions {
    /// Wall-clock columns make reports differ from run to run.
    pub include_timing: bool,
}

pub fn cells(records: &[RunRecord], opts: ReportOptions) -> Vec<Cell> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let c = &r.config;
        let model = format!(
            "{}-{}x{}{}",
            c.arch.name(),
            c.depth,
            c.width,
            if c.skip_connections || !c.arch.supports_skips() {
                ""
            } else {
                "-noskip"
            }
        );
        groups
            .entry((
                c.dataset.name().into(),
                model,
                c.binarization_label().into(),
                c.algorithm.name().into(),
            ))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, model, binarization, algorithm), rs)| {
            let accs: Vec<f64> = rs.iter().filter_map(|r| r.test_accuracy).map(|a| 100.0 * a).collect();
            let (mean, std) = mean_std(&accs);
            let peak = rs.iter().map(|r| r.peak_buffer_bytes as f64).sum::<f64>() / rs.len() as f64;
            Cell {
                dataset,
                model,
                binarization,
                algorithm,
                runs: rs.len(),
                failed: rs.iter().filter(|r| r.failed()).count(),
                test_accuracy_mean: mean,
                test_accuracy_std: std,
                test_accuracy: format_mean_std(mean, std),
                peak_buffer_mib: peak / (1024.0 * 1024.0),
                seconds_mean: opts
                    .include_timing
                    .then(|| rs.iter().map(|r| r.wall_seconds).sum::<f64>() / rs.len() as f64),
            }
        })
        .collect()
}

pub fn report(records: &[RunRecord], format: ReportFormat, opts: ReportOptions) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to report".into()));
    }
    let rows = cells(records, opts);
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(&rows).expect("cells serialize") + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec![
                "dataset",
                "model",
                "binarization",
                "algorithm",
                "runs",
                "failed",
                "test_accuracy_mean",
                "test_accuracy_std",
                "test_accuracy",
                "peak_buffer_mib",
            ];
            if opts.include_timing {
                header.push("seconds_mean");
            }
            let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
            w.write_record(&header).map_err(csv_err)?;
            for c in &rows {
                let mut rec = vec![
                    c.dataset.clone(),
                    c.model.clone(),
                    c.binarization.clone(),
                    c.algorithm.clone(),
                    c.runs.to_string(),
                    c.failed.to_string(),
                    format!("{:.4}", c.test_accuracy_mean),
                    format!("{:.4}", c.test_accuracy_std),
                    c.test_accuracy.clone(),
                    format!("{:.4}", c.peak_buffer_mib),
                ];
                if let Some(s) = c.seconds_mean {
                    rec.push(format!("{s:.2}"));
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
            Ok(
                String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
                    .expect("csv is utf-8"),
            )
        }
        ReportFormat::Table => {
            let mut header = vec![
                "dataset",
                "model",
                "binarization",
                "algorithm",
                "runs",
                "failed",
                "test acc % (std)",
                "peak buffers MiB",
            ];
            if opts.include_timing {
                header.push("seconds");
            }
            let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
            for c in &rows {
                let mut r = vec![
                    c.dataset.clone(),
                    c.model.clone(),
                    c.binarization.clone(),
                    c.algorithm.clone(),
                    c.runs.to_string(),
                    c.failed.to_string(),
                    c.test_accuracy.clone(),
                    format!("{:.2}", c.peak_buffer_mib),
                ];
                if let Some(s) = c.seconds_mean {
                    r.push(format!("{s:.1}"));
                }
                table.push(r);
            }
            let widths: Vec<usize> = (0..table[0].len())
                .map(|i| table.iter().map(|r| r[i].len()).max().unwrap())
                .collect();
            let mut out = String::new();
            for (ri, r) in table.iter().enumerate() {
                let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
                out.push_str(line.join("  ").trim_end());
                out.push('\n');
                if ri == 0 {
                    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
                    out.push('\n');
                }
            }
            Ok(out)
        }
    }
}
