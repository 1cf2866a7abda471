//! Adaptive attention modules: decide per batch whether the target domain
//! shares the source attention branch or uses its own.
//!
//! The decision compares a squashed cross-domain distance `m̂ ∈ [0, 1)` with a
//! threshold `λ`: shared when `m̂ < λ`, separated otherwise.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, channel_descriptor, AttentionState, Branch};
use crate::error::{Error, Result};
use crate::layers::Bound;
use crate::math;
use crate::mmd::{self, Estimator, KernelSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard used for the variance term and the distance denominator.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `tanh(|m_s - m_t| / max(|m_t|, ε))` on batch statistics.
    TanhRatio,
    /// `tanh` of a single-kernel MMD between channel descriptors.
    Mmd,
    /// `tanh` of the KL divergence between Gaussians fitted to each batch.
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSchedule {
    Constant(f64),
    PerStage(Vec<f64>),
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant(0.2)
    }
}

impl LambdaSchedule {
    pub fn for_stage(&self, stage: usize) -> f64 {
        match self {
            LambdaSchedule::Constant(l) => *l,
            LambdaSchedule::PerStage(ls) => ls[stage],
        }
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        let values: &[f64] = match self {
            LambdaSchedule::Constant(l) => core::slice::from_ref(l),
            LambdaSchedule::PerStage(ls) => {
                if ls.len() != stages {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "lambda schedule has {} entries for {} stages",
                        ls.len(),
                        stages
                    )));
                }
                ls
            }
        };
        if values.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument("lambda values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRouting {
    /// Use the training-time moving average of `m̂`, frozen after training.
    #[default]
    FrozenEma,
    /// Recompute `m̂` on each evaluation batch.
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingPolicy {
    pub metric: Metric,
    pub lambda: LambdaSchedule,
    pub ema_decay: f64,
    pub eval_mode: EvalRouting,
    pub eps: f64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            metric: Metric::TanhRatio,
            lambda: LambdaSchedule::default(),
            ema_decay: 0.9,
            eval_mode: EvalRouting::FrozenEma,
            eps: DEFAULT_EPS,
        }
    }
}

impl RoutingPolicy {
    pub fn validate(&self, stages: usize) -> Result<()> {
        self.lambda.validate(stages)?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument("ema_decay must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub module_id: usize,
    pub m_s: f64,
    pub m_t: f64,
    pub m_hat: f64,
    pub lambda: f64,
    pub separated: bool,
    pub step: usize,
}

/// `μ / sqrt(σ² + ε)` over every element of the batch.
pub fn domain_statistic(x: &Tensor, eps: f64) -> Result<f64> {
    let (mean, var) = moments(x)?;
    Ok(mean / math::sqrt(var + eps))
}

fn moments(x: &Tensor) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

fn squash(v: f64) -> f64 {
    math::tanh(v).clamp(0.0, math::BELOW_ONE)
}

/// `tanh(|m_s - m_t| / max(|m_t|, ε))`, kept strictly below one.
pub fn statistic_distance(m_s: f64, m_t: f64, eps: f64) -> f64 {
    squash((m_s - m_t).abs() / m_t.abs().max(eps))
}

/// `true` (separated) unless `m̂ < λ`.
pub fn route_decide(m_hat: f64, lambda: f64) -> bool {
    !(m_hat < lambda)
}

/// Domain statistics and squashed distance under a metric.
pub fn batch_distance(metric: Metric, xs: &Tensor, xt: &Tensor, eps: f64) -> Result<(f64, f64, f64)> {
    let m_s = domain_statistic(xs, eps)?;
    let m_t = domain_statistic(xt, eps)?;
    let m_hat = match metric {
        Metric::TanhRatio => statistic_distance(m_s, m_t, eps),
        Metric::Mmd => {
            let ds = plane_means(xs)?;
            let dt = plane_means(xt)?;
            let sigma = mmd::pooled_median_bandwidth(&ds, &dt)?;
            let v = mmd::mmd2(&ds, &dt, &KernelSpec::single(sigma)?, Estimator::Biased)?;
            squash(v.max(0.0))
        }
        Metric::Kl => {
            let (mu_s, var_s) = moments(xs)?;
            let (mu_t, var_t) = moments(xt)?;
            let (vs, vt) = (var_s + eps, var_t + eps);
            let kl = 0.5 * (math::ln(vt / vs) + (vs + (mu_s - mu_t) * (mu_s - mu_t)) / vt - 1.0);
            squash(kl.max(0.0))
        }
    };
    Ok((m_s, m_t, m_hat))
}

/// Channel descriptors of a plain tensor (`N×C×H×W -> N×C`).
fn plane_means(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("plane_means", alloc::format!("{:?}", s)));
    }
    let hw = s[2] * s[3];
    let data = x.data().chunks(hw.max(1)).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(alloc::vec![s[0], s[1]], data)
}

/// An attention module together with its routing history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aam {
    pub module_id: usize,
    pub attention: AttentionState,
    /// Exponential moving average of `m̂` over training batches.
    pub ema_mhat: Option<f64>,
}

impl Aam {
    pub fn new(module_id: usize, attention: AttentionState) -> Self {
        Aam {
            module_id,
            attention,
            ema_mhat: None,
        }
    }

    /// Measures the batch distance, updates the moving average, routes the
    /// target batch and returns the decision record.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        xs: Var,
        xt: Var,
        policy: &RoutingPolicy,
        lambda: f64,
        step: usize,
    ) -> Result<(Var, Var, RouteDecision)> {
        let (m_s, m_t, m_hat) = batch_distance(policy.metric, tape.value(xs), tape.value(xt), policy.eps)?;
        self.ema_mhat = Some(match self.ema_mhat {
            None => m_hat,
            Some(e) => policy.ema_decay * e + (1.0 - policy.ema_decay) * m_hat,
        });
        let separated = route_decide(m_hat, lambda);
        let (ys, yt) = self.forward_routed(tape, bound, xs, xt, separated)?;
        let decision = RouteDecision {
            module_id: self.module_id,
            m_s,
            m_t,
            m_hat,
            lambda,
            separated,
            step,
        };
        Ok((ys, yt, decision))
    }

    /// Forward with a fixed route for the target batch.
    pub fn forward_routed(&self, tape: &mut Tape, bound: &Bound, xs: Var, xt: Var, separated: bool) -> Result<(Var, Var)> {
        let (ss, st) = (tape.value(xs).shape(), tape.value(xt).shape());
        if ss.len() != 4 || st.len() != 4 || ss[1..] != st[1..] {
            return Err(Error::shape("aam_forward", alloc::format!("source {:?}, target {:?}", ss, st)));
        }
        let (ys, _) = attend(tape, bound, xs, &self.attention, Branch::Source)?;
        let (yt, _) = attend(tape, bound, xt, &self.attention, Self::target_branch(separated))?;
        Ok((ys, yt))
    }

    pub fn target_branch(separated: bool) -> Branch {
        if separated {
            Branch::Target
        } else {
            Branch::Source
        }
    }

    /// Route used at evaluation under the frozen moving average.
    pub fn frozen_route(&self, lambda: f64) -> bool {
        self.ema_mhat.is_some_and(|e| route_decide(e, lambda))
    }

    /// Channel descriptors of `x`, for reporting.
    pub fn descriptors(tape: &mut Tape, x: Var) -> Result<Var> {
        channel_descriptor(tape, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub module_id: usize,
    pub step_count: usize,
    pub separation_fraction: f64,
    pub mean_mhat: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingReport {
    pub rows: Vec<RoutingRow>,
}

pub const ROUTING_CSV_HEADER: &str = "module_id,step_count,separation_fraction,mean_mhat";

impl RoutingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROUTING_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.module_id, r.step_count, r.separation_fraction, r.mean_mhat);
        }
        out
    }

    /// Fraction of all decisions that separated.
    pub fn overall_fraction(&self) -> f64 {
        let steps: usize = self.rows.iter().map(|r| r.step_count).sum();
        if steps == 0 {
            return 0.0;
        }
        self.rows.iter().map(|r| r.separation_fraction * r.step_count as f64).sum::<f64>() / steps as f64
    }
}

/// Per-module separation fraction and mean `m̂`, ordered by module id.
pub fn routing_report(decisions: &[RouteDecision]) -> Result<RoutingReport> {
    if decisions.is_empty() {
        return Err(Error::InvalidArgument("routing report needs at least one decision".into()));
    }
    let mut acc: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
    for d in decisions {
        let e = acc.entry(d.module_id).or_insert((0, 0, 0.0));
        e.0 += 1;
        e.1 += d.separated as usize;
        e.2 += d.m_hat;
    }
    let rows = acc
        .into_iter()
        .map(|(module_id, (n, sep, sum))| RoutingRow {
            module_id,
            step_count: n,
            separation_fraction: sep as f64 / n as f64,
            mean_mhat: sum / n as f64,
        })
        .collect();
    Ok(RoutingReport { rows })
}

/// Re-thresholds a log of decisions at a different `λ`.
pub fn rethreshold(decisions: &[RouteDecision], lambda: f64) -> Vec<RouteDecision> {
    decisions
        .iter()
        .map(|d| RouteDecision {
            lambda,
            separated: route_decide(d.m_hat, lambda),
            ..d.clone()
        })
        .collect()
}
