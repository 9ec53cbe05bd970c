//! Per-evaluation records, composite backdoor metrics and the summary row.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_clean(acc_clean: f64) -> Result<()> {
    if acc_clean > 0.0 && acc_clean.is_finite() {
        Ok(())
    } else {
        Err(Error::UndefinedMetric("clean accuracy must be > 0"))
    }
}

/// Targeted attack impact: `acc_attack / acc_clean + asr`.
pub fn tai(acc_attack: f64, acc_clean: f64, asr: f64) -> Result<f64> {
    check_clean(acc_clean)?;
    Ok(acc_attack / acc_clean + asr)
}

/// Targeted defense robustness: `acc_attack / acc_clean + 1 - asr`. A defense
/// that keeps clean accuracy and zeroes the backdoor scores 2.
pub fn tdr(acc_attack: f64, acc_clean: f64, asr: f64) -> Result<f64> {
    check_clean(acc_clean)?;
    Ok(acc_attack / acc_clean + 1.0 - asr)
}

/// One evaluation of the global model. `agg_seconds` is not written to
/// `rounds.jsonl`, which must be identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Rounds completed when the model was evaluated.
    pub round: usize,
    pub acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub asr: Option<f64>,
    #[serde(skip, default)]
    pub agg_seconds: f64,
    /// Size of the defense's survivor set in the last round, for filtering rules.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub survivors: Option<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
    /// Set on the last line of an aborted run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl MetricsRecord {
    pub fn check(&self) -> Result<()> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !ok(self.acc) || !self.asr.is_none_or(ok) {
            return Err(Error::Integrity(format!("metric outside [0,1] at round {}", self.round)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub attack: String,
    pub defense: String,
    pub algorithm: String,
    pub partition: String,
    pub final_acc: f64,
    pub final_asr: Option<f64>,
    pub tai: Option<f64>,
    pub tdr: Option<f64>,
    /// Median per-round aggregation time in seconds.
    pub agg_time: f64,
}

pub const SUMMARY_HEADER: &str = "config_hash,attack,defense,algorithm,partition,final_acc,final_asr,tai,tdr,agg_time";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl SummaryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{},{},{},{:.6e}",
            self.config_hash,
            self.attack,
            self.defense,
            self.algorithm,
            self.partition,
            self.final_acc,
            cell(self.final_asr),
            cell(self.tai),
            cell(self.tdr),
            self.agg_time
        )
    }
}

/// Mean of the last `window` values (all of them if there are fewer).
pub fn tail_mean(xs: &[f64], window: usize) -> Option<f64> {
    let tail = &xs[xs.len().saturating_sub(window)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Appends `row` to the CSV at `path`, writing the header for a new file.
/// A row whose config hash is already present is left alone. Returns whether
/// a line was written.
pub fn append_summary(path: &Path, row: &SummaryRow) -> Result<bool> {
    let existing = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let key = format!("{},", row.config_hash);
    if existing.lines().any(|l| l.starts_with(&key)) {
        return Ok(false);
    }
    let mut text = String::new();
    if existing.is_empty() {
        text.push_str(SUMMARY_HEADER);
        text.push('\n');
    }
    text.push_str(&row.to_csv());
    text.push('\n');
    // one write call so concurrent sweep processes do not interleave lines
    OpenOptions::new().create(true).append(true).open(path)?.write_all(text.as_bytes())?;
    Ok(true)
}
