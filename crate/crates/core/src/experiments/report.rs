//! Result rows, per-configuration aggregates and their text / JSONL forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub prompt: String,
    pub regime: String,
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Mean and population standard deviation of one (prompt, regime) key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub prompt: String,
    pub regime: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportStyle {
    Table,
    Jsonl,
}

impl Report {
    pub fn push(&mut self, prompt: &str, regime: &str, correct: usize, n: usize, seed: u64) {
        let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
        self.rows.push(ReportRow { prompt: prompt.into(), regime: regime.into(), accuracy, n, seed });
    }

    pub fn push_accuracy(&mut self, prompt: &str, regime: &str, accuracy: f64, n: usize, seed: u64) {
        self.rows.push(ReportRow { prompt: prompt.into(), regime: regime.into(), accuracy, n, seed });
    }

    /// Aggregates in order of first appearance.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            let k = (r.prompt.as_str(), r.regime.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(prompt, regime)| {
                let xs: Vec<f64> =
                    self.rows.iter().filter(|r| r.prompt == prompt && r.regime == regime).map(|r| r.accuracy).collect();
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                Aggregate { prompt: prompt.into(), regime: regime.into(), mean, std: var.sqrt(), seeds: xs.len() }
            })
            .collect()
    }

    pub fn mean(&self, prompt: &str, regime: &str) -> Option<f64> {
        self.aggregates().into_iter().find(|a| a.prompt == prompt && a.regime == regime).map(|a| a.mean)
    }

    /// Rows of `other` appended after these.
    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }
}

/// `x` to three decimals, ties rounded up.
pub fn format_3dp(x: f64) -> String {
    // Accuracies are ratios that binary floats can only approximate, so a
    // decimal tie like 0.1235 may sit a hair below its true value.
    let scaled = (x * 1000.0 + 0.5 + 1e-7).floor();
    format!("{:.3}", scaled / 1000.0)
}

pub fn format_report(report: &Report, style: ReportStyle) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::EmptyInput("empty report".into()));
    }
    let mut out = String::new();
    match style {
        ReportStyle::Jsonl => {
            for r in &report.rows {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
        }
        ReportStyle::Table => {
            let pw = report.rows.iter().map(|r| r.prompt.len()).max().unwrap_or(0).max("prompt".len());
            let rw = report.rows.iter().map(|r| r.regime.len()).max().unwrap_or(0).max("regime".len());
            out.push_str(&format!("{:<pw$}  {:<rw$}  {:>8}  {:>6}  {}\n", "prompt", "regime", "accuracy", "n", "seed"));
            for r in &report.rows {
                out.push_str(&format!(
                    "{:<pw$}  {:<rw$}  {:>8}  {:>6}  {}\n",
                    r.prompt,
                    r.regime,
                    format_3dp(r.accuracy),
                    r.n,
                    r.seed
                ));
            }
        }
    }
    Ok(out)
}

/// Mean ± population std per (prompt, regime).
pub fn format_aggregates(report: &Report) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::EmptyInput("empty report".into()));
    }
    let aggs = report.aggregates();
    let pw = aggs.iter().map(|a| a.prompt.len()).max().unwrap_or(0).max("prompt".len());
    let rw = aggs.iter().map(|a| a.regime.len()).max().unwrap_or(0).max("regime".len());
    let mut out = format!("{:<pw$}  {:<rw$}  {:>8}  {:>7}  seeds\n", "prompt", "regime", "mean", "std");
    for a in &aggs {
        out.push_str(&format!(
            "{:<pw$}  {:<rw$}  {:>8}  {:>7}  {}\n",
            a.prompt,
            a.regime,
            format_3dp(a.mean),
            format_3dp(a.std),
            a.seeds
        ));
    }
    Ok(out)
}

/// Inverse of the JSONL style of [`format_report`].
pub fn parse_report_jsonl(raw: &str) -> Result<Report> {
    let mut rows = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        rows.push(row);
    }
    Ok(Report { rows })
}
