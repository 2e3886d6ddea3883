use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::EvalSummary;
use crate::mining::SelectionReport;

pub const METRICS_FORMAT: &str = "invjoint-metrics";
pub const METRICS_VERSION: u32 = 1;

/// One epoch of training, as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    /// Mean invariance loss over the steps where it ran.
    pub loss_inv: Option<f64>,
    pub loss_align: Option<f64>,
    pub steps: usize,
    pub steps_with_inv: usize,
    pub hard_set_size: usize,
    pub gate_invariant_mean: f64,
    pub gate_confounder_mean: f64,
    #[serde(flatten)]
    pub eval: EvalSummary,
    pub selection: Option<SelectionReport>,
}

pub const RECORD_FIELDS: &[&str] = &[
    "epoch",
    "lr",
    "loss_ce",
    "loss_inv",
    "loss_align",
    "steps",
    "steps_with_inv",
    "hard_set_size",
    "gate_invariant_mean",
    "gate_confounder_mean",
    "acc2",
    "acc3",
    "acc_joint",
    "conflict_ratio",
    "confusion2",
    "confusion3",
    "confusion_joint",
    "selection",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub format: String,
    pub version: u32,
    pub fields: Vec<String>,
}

impl Default for MetricsHeader {
    fn default() -> Self {
        Self {
            format: METRICS_FORMAT.into(),
            version: METRICS_VERSION,
            fields: RECORD_FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Line-delimited JSON: a header line, then one record per epoch.
pub fn metrics_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = serde_json::to_string(&MetricsHeader::default())?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_jsonl(records)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let mut lines = text.lines();
    let header: MetricsHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::Format {
        what: "metrics".into(),
        detail: "empty log".into(),
    })?)?;
    if header.format != METRICS_FORMAT || header.version != METRICS_VERSION {
        return Err(Error::Format {
            what: "metrics".into(),
            detail: format!("unsupported header {} v{}", header.format, header.version),
        });
    }
    let records = lines
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}
