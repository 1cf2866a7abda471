//! Per-channel attention difference between the source path and the target
//! path of a trained model.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::attention::Branch;
use crate::error::Result;
use crate::model::{mean_attention, Model};
use crate::routing::{Aam, RoutingPolicy};
use crate::tensor::Tensor;

pub const ATTENTION_CSV_HEADER: &str = "stage,channel,omega_diff,stage_mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiffRow {
    pub stage: usize,
    pub channel: usize,
    pub omega_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AttentionDiffReport {
    pub rows: Vec<AttentionDiffRow>,
    pub stage_means: Vec<f64>,
}

impl AttentionDiffReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ATTENTION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.stage, r.channel, r.omega_diff, self.stage_means[r.stage]);
        }
        out
    }

    pub fn overall_mean(&self) -> f64 {
        if self.stage_means.is_empty() {
            return 0.0;
        }
        self.stage_means.iter().sum::<f64>() / self.stage_means.len() as f64
    }
}

/// `|mean ω_s,i − mean ω_t,i|` per stage and channel. Both paths see the same
/// pooled evaluation images (source then target rows); the source path uses
/// the source branch everywhere, the target path follows the model's
/// evaluation routes. Stages without attention contribute no rows.
pub fn attention_diff_report(
    model: &Model,
    source: &Tensor,
    target: &Tensor,
    policy: &RoutingPolicy,
    chunk: usize,
) -> Result<AttentionDiffReport> {
    let images = Tensor::concat_rows(&[source, target])?;
    let routes = model.frozen_routes(policy);
    let source_branches = alloc::vec![Branch::Source; routes.len()];
    let target_branches: Vec<Branch> = routes.iter().map(|&r| Aam::target_branch(r)).collect();
    let ws = mean_attention(model, &images, &source_branches, chunk)?;
    let wt = mean_attention(model, &images, &target_branches, chunk)?;
    let mut report = AttentionDiffReport::default();
    for (stage, (a, b)) in ws.iter().zip(&wt).enumerate() {
        if model.stages[stage].aam.is_none() {
            report.stage_means.push(0.0);
            continue;
        }
        let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
        report.stage_means.push(diffs.iter().sum::<f64>() / diffs.len().max(1) as f64);
        for (channel, omega_diff) in diffs.into_iter().enumerate() {
            report.rows.push(AttentionDiffRow {
                stage,
                channel,
                omega_diff,
            });
        }
    }
    Ok(report)
}
