//! Output files of a run. Everything except the `run_info.json` sidecar is a
//! pure function of the configuration, so identical runs write identical bytes.

use std::fs;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use gdcan_core::diagnostics::AttentionDiffReport;
use gdcan_core::model::Model;
use gdcan_core::routing::{routing_report, RouteDecision, RoutingReport};
use gdcan_core::train::{EpochMetrics, StepRecord};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const ROUTING_FILE: &str = "routing.csv";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_INFO_FILE: &str = "run_info.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_CSV_HEADER: &str = "lambda,separation_count,separation_fraction,target_accuracy";

/// A trained model together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub run: RunConfig,
    pub model: Model,
}

pub fn json_lines<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn write_metrics(dir: &Path, metrics: &[EpochMetrics]) -> io::Result<()> {
    fs::write(dir.join(METRICS_FILE), json_lines(metrics))
}

pub fn write_steps(dir: &Path, steps: &[StepRecord]) -> io::Result<()> {
    fs::write(dir.join(STEPS_FILE), json_lines(steps))
}

/// Per-module routing summary; a header-only file when nothing was routed.
pub fn routing_csv(decisions: &[RouteDecision]) -> String {
    match routing_report(decisions) {
        Ok(r) => r.to_csv(),
        Err(_) => RoutingReport::default().to_csv(),
    }
}

pub fn write_routing(dir: &Path, decisions: &[RouteDecision]) -> io::Result<()> {
    fs::write(dir.join(ROUTING_FILE), routing_csv(decisions))
}

pub fn write_attention(dir: &Path, report: &AttentionDiffReport) -> io::Result<()> {
    fs::write(dir.join(ATTENTION_FILE), report.to_csv())
}

pub fn write_model(dir: &Path, file: &ModelFile) -> io::Result<()> {
    fs::write(dir.join(MODEL_FILE), serde_json::to_string(file).expect("model serializes"))
}

pub fn read_model(path: &Path) -> Result<ModelFile, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read model {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("invalid model file {}: {e}", path.display()))
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> io::Result<()> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub elapsed_secs: f64,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// The only file carrying wall-clock times.
pub fn write_run_info(dir: &Path, command: &str, started_unix: f64) -> io::Result<()> {
    let finished_unix = unix_now();
    let info = RunInfo {
        command: command.into(),
        started_unix,
        finished_unix,
        elapsed_secs: finished_unix - started_unix,
    };
    fs::write(dir.join(RUN_INFO_FILE), serde_json::to_string_pretty(&info).expect("info serializes") + "\n")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Attention modules routed apart at evaluation.
    pub separation_count: usize,
    /// Share of training-time decisions that separated.
    pub separation_fraction: f64,
    pub target_accuracy: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.lambda, r.separation_count, r.separation_fraction, r.target_accuracy
        ));
    }
    out
}
