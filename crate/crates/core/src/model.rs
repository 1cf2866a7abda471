//! The desk-scale network: convolutional stages each ending in an attention
//! module, global pooling, a hidden layer and a classifier, plus two
//! adaptation blocks on the target path (after pooling and after softmax).

use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{class_members, AdaptationBlock, RegularizationSubset};
use crate::attention::Branch;
use crate::error::{Error, Result};
use crate::layers::{he_normal, Affine, Bound, ParamGroup, ParamId, ParamStore};
use crate::mmd::{self, KernelSpec};
use crate::objective::{self, LossWeights};
use crate::routing::{route_decide, Aam, EvalRouting, RouteDecision, RoutingPolicy};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variance guard of the frozen normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Domain-conditioned attention with adaptive routing.
    #[default]
    Adaptive,
    /// One squeeze-excite branch shared by both domains.
    SharedSe,
    /// No attention modules.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
    pub tau: usize,
    pub freeze_norm: bool,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            widths: alloc::vec![16, 32, 64],
            hidden: 64,
            classes: 6,
            tau: 16,
            freeze_norm: true,
            attention: AttentionMode::Adaptive,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("channel widths must be positive and non-empty".into()));
        }
        if self.hidden == 0 || self.classes < 2 || self.tau == 0 {
            return Err(Error::InvalidArgument("hidden, tau must be positive and classes at least 2".into()));
        }
        Ok(())
    }
}

/// Per-channel normalization with stored statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, channels: usize, freeze: bool) -> Self {
        let g = if freeze { ParamGroup::Frozen } else { ParamGroup::Backbone };
        Norm {
            gamma: store.add(alloc::format!("{name}.gamma"), g, Tensor::full(&[channels], 1.0)),
            beta: store.add(alloc::format!("{name}.beta"), g, Tensor::zeros(&[channels])),
            mean: store.add(alloc::format!("{name}.mean"), ParamGroup::Frozen, Tensor::zeros(&[channels])),
            var: store.add(alloc::format!("{name}.var"), ParamGroup::Frozen, Tensor::full(&[channels], 1.0)),
        }
    }

    /// `γ·(x − μ)/sqrt(v + ε) + β` per channel.
    fn forward(&self, tape: &mut Tape, bound: &Bound, store: &ParamStore, x: Var) -> Result<Var> {
        let inv = store.get(self.var).map(|v| 1.0 / crate::math::sqrt(v + NORM_EPS));
        let inv = tape.constant(inv);
        let scale = tape.mul(bound.var(self.gamma), inv)?;
        let mean = tape.constant(store.get(self.mean).clone());
        let offset = tape.mul(mean, scale)?;
        let shift = tape.sub(bound.var(self.beta), offset)?;
        tape.channel_affine(x, scale, shift)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub norm: Norm,
    pub aam: Option<Aam>,
}

/// How the attention modules route the target batch.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Measure `m̂` on the batch, update the moving averages and threshold.
    Policy { policy: &'a RoutingPolicy, step: usize },
    /// Measure and threshold without touching the moving averages.
    Measure { policy: &'a RoutingPolicy },
    /// One fixed decision per stage (`true` = separated).
    Fixed(&'a [bool]),
}

/// Features of one forward pass over a source and a target batch.
#[derive(Clone, Debug)]
pub struct Forward {
    pub pooled_s: Var,
    pub logits_s: Var,
    pub probs_s: Var,
    pub pooled_t: Var,
    pub adapted1_t: Var,
    pub probs_t: Var,
    pub adapted2_t: Var,
    pub decisions: Vec<RouteDecision>,
}

/// Scalar nodes of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_s: Var,
    pub l_m: Var,
    pub l_reg: Var,
    pub l_e: Var,
    pub total: Var,
}

/// Kernel bandwidth choice for the two adapted layers.
#[derive(Clone, Debug)]
pub enum Kernels {
    /// Multi-scale kernel around the median distance of the pooled batch.
    Median,
    Fixed(Vec<KernelSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stages: Vec<Stage>,
    pub hidden: Affine,
    pub classifier: Affine,
    pub blocks: Vec<AdaptationBlock>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.widths.iter().enumerate() {
            let name = alloc::format!("stage{i}");
            let conv_w = store.add(
                alloc::format!("{name}.conv.weight"),
                ParamGroup::Backbone,
                he_normal(&[c_out, c_in, 3, 3], c_in * 9, rng),
            );
            let conv_b = store.add(alloc::format!("{name}.conv.bias"), ParamGroup::Backbone, Tensor::zeros(&[c_out]));
            let norm = Norm::new(&mut store, &alloc::format!("{name}.norm"), c_out, config.freeze_norm);
            let aam = match config.attention {
                AttentionMode::None => None,
                _ => {
                    let state = crate::attention::AttentionState::new(
                        &mut store,
                        &alloc::format!("{name}.attention"),
                        c_out,
                        config.tau,
                        rng,
                    )?;
                    Some(Aam::new(i, state))
                }
            };
            stages.push(Stage {
                conv_w,
                conv_b,
                norm,
                aam,
            });
            c_in = c_out;
        }
        let feat = c_in;
        let hidden = Affine::new(&mut store, "hidden", feat, config.hidden, ParamGroup::Backbone, rng);
        let classifier = Affine::new(&mut store, "classifier", config.hidden, config.classes, ParamGroup::Classifier, rng);
        let blocks = alloc::vec![
            AdaptationBlock::new(&mut store, "adapt0", feat, 0, false, rng),
            AdaptationBlock::new(&mut store, "adapt1", config.classes, 1, true, rng),
        ];
        Ok(Model {
            config,
            store,
            stages,
            hidden,
            classifier,
            blocks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().expect("validated")
    }

    fn conv(&self, tape: &mut Tape, bound: &Bound, stage: &Stage, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(stage.conv_w), bound.var(stage.conv_b), 2, 1)?;
        let y = stage.norm.forward(tape, bound, &self.store, y)?;
        Ok(tape.relu(y))
    }

    /// Sets each stage's normalization statistics to the per-channel mean and
    /// variance of its pre-normalization activations on `images`. Intended to
    /// run once before training; the statistics stay fixed afterwards.
    pub fn calibrate_norm(&mut self, images: &Tensor) -> Result<()> {
        for si in 0..self.stages.len() {
            let input = if si == 0 {
                images.clone()
            } else {
                self.stage_output(images, si - 1)?
            };
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let x = tape.constant(input);
            let stage = &self.stages[si];
            let y = tape.conv2d(x, bound.var(stage.conv_w), bound.var(stage.conv_b), 2, 1)?;
            let t = tape.value(y);
            let s = t.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let count = (s[0] * hw).max(1) as f64;
            let (mut sum, mut sq) = (alloc::vec![0.0; c], alloc::vec![0.0; c]);
            for (i, plane) in t.data().chunks(hw).enumerate() {
                sum[i % c] += plane.iter().sum::<f64>();
                sq[i % c] += plane.iter().map(|v| v * v).sum::<f64>();
            }
            let mean: Vec<f64> = sum.iter().map(|m| m / count).collect();
            let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0)).collect();
            let norm = stage.norm.clone();
            *self.store.get_mut(norm.mean) = Tensor::new(alloc::vec![c], mean)?;
            *self.store.get_mut(norm.var) = Tensor::new(alloc::vec![c], var)?;
        }
        Ok(())
    }

    fn stage_output(&self, images: &Tensor, upto: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut x = tape.constant(images.clone());
        for stage in &self.stages[..=upto] {
            x = self.conv(&mut tape, &bound, stage, x)?;
            if let Some(aam) = &stage.aam {
                x = crate::attention::attend(&mut tape, &bound, x, &aam.attention, Branch::Source)?.0;
            }
        }
        Ok(tape.value(x).clone())
    }

    /// Backbone over a source and a target batch with routing.
    pub fn backbone_pair(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        xs: Var,
        xt: Var,
        routing: Routing<'_>,
    ) -> Result<(Var, Var, Vec<RouteDecision>)> {
        let (mut s, mut t) = (xs, xt);
        let mut decisions = Vec::new();
        if let Routing::Fixed(r) = routing {
            if r.len() != self.stages.len() {
                return Err(Error::InvalidArgument(alloc::format!(
                    "{} routes for {} stages",
                    r.len(),
                    self.stages.len()
                )));
            }
        }
        let shared_only = self.config.attention == AttentionMode::SharedSe;
        for si in 0..self.stages.len() {
            let stage = &self.stages[si];
            s = self.conv(tape, bound, stage, s)?;
            t = self.conv(tape, bound, stage, t)?;
            if stage.aam.is_none() {
                continue;
            }
            let aam = self.stages[si].aam.as_mut().expect("checked");
            let (ys, yt) = match routing {
                Routing::Fixed(r) => aam.forward_routed(tape, bound, s, t, r[si] && !shared_only)?,
                Routing::Policy { policy, step } => {
                    let lambda = policy.lambda.for_stage(si);
                    let (ys, yt, mut d) = if shared_only {
                        let (a, b) = aam.forward_routed(tape, bound, s, t, false)?;
                        let (m_s, m_t, m_hat) =
                            crate::routing::batch_distance(policy.metric, tape.value(s), tape.value(t), policy.eps)?;
                        let d = RouteDecision {
                            module_id: si,
                            m_s,
                            m_t,
                            m_hat,
                            lambda,
                            separated: false,
                            step,
                        };
                        (a, b, d)
                    } else {
                        aam.forward(tape, bound, s, t, policy, lambda, step)?
                    };
                    d.module_id = si;
                    decisions.push(d);
                    (ys, yt)
                }
                Routing::Measure { policy } => {
                    let lambda = policy.lambda.for_stage(si);
                    let (m_s, m_t, m_hat) =
                        crate::routing::batch_distance(policy.metric, tape.value(s), tape.value(t), policy.eps)?;
                    let separated = route_decide(m_hat, lambda) && !shared_only;
                    decisions.push(RouteDecision {
                        module_id: si,
                        m_s,
                        m_t,
                        m_hat,
                        lambda,
                        separated,
                        step: 0,
                    });
                    aam.forward_routed(tape, bound, s, t, separated)?
                }
            };
            s = ys;
            t = yt;
        }
        Ok((tape.global_avg_pool(s)?, tape.global_avg_pool(t)?, decisions))
    }

    /// Hidden layer, classifier and softmax on pooled features.
    fn head(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, bound, pooled)?;
        let h = tape.relu(h);
        let logits = self.classifier.forward(tape, bound, h)?;
        let probs = tape.softmax(logits)?;
        Ok((logits, probs))
    }

    /// Target path from pooled features: first block, head, second block.
    /// Returns `(Ĝ_1, G_2, Ĝ_2)`.
    fn target_path(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<(Var, Var, Var)> {
        let a1 = self.blocks[0].apply(tape, bound, pooled)?;
        let (_, probs) = self.head(tape, bound, a1)?;
        let a2 = self.blocks[1].apply(tape, bound, probs)?;
        Ok((a1, probs, a2))
    }

    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, xs: Var, xt: Var, routing: Routing<'_>) -> Result<Forward> {
        let (pooled_s, pooled_t, decisions) = self.backbone_pair(tape, bound, xs, xt, routing)?;
        let (logits_s, probs_s) = self.head(tape, bound, pooled_s)?;
        let (adapted1_t, probs_t, adapted2_t) = self.target_path(tape, bound, pooled_t)?;
        Ok(Forward {
            pooled_s,
            logits_s,
            probs_s,
            pooled_t,
            adapted1_t,
            probs_t,
            adapted2_t,
            decisions,
        })
    }

    /// The full objective on one pair of batches.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        xs: Var,
        labels_s: &[usize],
        xt: Var,
        subset: &RegularizationSubset,
        weights: &LossWeights,
        kernels: &Kernels,
        routing: Routing<'_>,
    ) -> Result<(LossNodes, Forward)> {
        let fwd = self.forward(tape, bound, xs, xt, routing)?;
        let l_s = objective::source_ce_loss(tape, fwd.logits_s, labels_s)?;
        let source = [fwd.pooled_s, fwd.probs_s];
        let target = [fwd.adapted1_t, fwd.adapted2_t];
        let kernels = match kernels {
            Kernels::Fixed(k) => {
                if k.len() != 2 {
                    return Err(Error::InvalidArgument("two kernels, one per adapted layer".into()));
                }
                k.clone()
            }
            Kernels::Median => source
                .iter()
                .zip(&target)
                .map(|(&s, &t)| KernelSpec::multi_scale(mmd::pooled_median_bandwidth(tape.value(s), tape.value(t))?))
                .collect::<Result<Vec<_>>>()?,
        };
        let l_m = crate::adaptation::alignment_loss_adapted(tape, &source, &target, &kernels)?;

        let l_reg = if subset.is_empty() {
            class_members(labels_s, self.config.classes)?;
            tape.constant(Tensor::scalar(0.0))
        } else {
            let rows = tape.gather_rows(fwd.pooled_s, &subset.indices)?;
            let (r1, _, r2) = self.target_path(tape, bound, rows)?;
            crate::adaptation::regularization_loss_adapted(
                tape,
                &source,
                labels_s,
                &[r1, r2],
                subset.len(),
                &kernels,
                self.config.classes,
            )?
        };
        let l_e = objective::target_entropy_loss(tape, fwd.adapted2_t)?;
        let total = objective::total_loss_node(tape, l_s, l_m, l_reg, l_e, weights)?;
        Ok((
            LossNodes {
                l_s,
                l_m,
                l_reg,
                l_e,
                total,
            },
            fwd,
        ))
    }

    /// Evaluation routes under the frozen moving averages (`true` = separated).
    pub fn frozen_routes(&self, policy: &RoutingPolicy) -> Vec<bool> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| match (&s.aam, self.config.attention) {
                (Some(aam), AttentionMode::Adaptive) => aam.frozen_route(policy.lambda.for_stage(i)),
                _ => false,
            })
            .collect()
    }

    /// Class probabilities for source images (source branch, no blocks) and
    /// target images (routed, through the blocks), evaluated in chunks. Under
    /// per-batch routing each target chunk is paired with a source chunk.
    pub fn predict(
        &mut self,
        source: &Tensor,
        target: &Tensor,
        policy: &RoutingPolicy,
        chunk: usize,
    ) -> Result<(Tensor, Tensor)> {
        let (ns, nt) = (source.rows(), target.rows());
        if ns == 0 || nt == 0 {
            return Err(Error::EmptyBatch);
        }
        let chunk = chunk.max(1);
        let frozen = self.frozen_routes(policy);
        let (sc, tc) = (ns.div_ceil(chunk), nt.div_ceil(chunk));
        let (mut ps, mut pt) = (Vec::with_capacity(ns), Vec::with_capacity(nt));
        let range = |i: usize, n: usize| (i * chunk..((i + 1) * chunk).min(n)).collect::<Vec<usize>>();
        for i in 0..sc.max(tc) {
            let xs = source.select_rows(&range(i % sc, ns));
            let xt = target.select_rows(&range(i % tc, nt));
            let (a, b) = self.predict_chunk(&xs, &xt, policy, &frozen)?;
            if i < sc {
                ps.extend_from_slice(a.data());
            }
            if i < tc {
                pt.extend_from_slice(b.data());
            }
        }
        let k = self.config.classes;
        Ok((Tensor::new(alloc::vec![ns, k], ps)?, Tensor::new(alloc::vec![nt, k], pt)?))
    }

    fn predict_chunk(&mut self, xs: &Tensor, xt: &Tensor, policy: &RoutingPolicy, frozen: &[bool]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let (xs, xt) = (tape.constant(xs.clone()), tape.constant(xt.clone()));
        let routing = match policy.eval_mode {
            EvalRouting::FrozenEma => Routing::Fixed(frozen),
            EvalRouting::PerBatch => Routing::Measure { policy },
        };
        let fwd = self.forward(&mut tape, &bound, xs, xt, routing)?;
        Ok((tape.value(fwd.probs_s).clone(), tape.value(fwd.adapted2_t).clone()))
    }
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = probs.row_len();
    let hits = probs
        .data()
        .chunks(k.max(1))
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean attention weights of each stage over a set, with the branch used at
/// each stage given by `branches`.
pub fn mean_attention(model: &Model, images: &Tensor, branches: &[Branch], chunk: usize) -> Result<Vec<Vec<f64>>> {
    if branches.len() != model.stages.len() {
        return Err(Error::InvalidArgument("one branch per stage".into()));
    }
    let mut sums: Vec<Vec<f64>> = model.config.widths.iter().map(|&c| alloc::vec![0.0; c]).collect();
    let n = images.rows();
    let chunk = chunk.max(1);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut x = tape.constant(images.select_rows(&idx));
        for (si, stage) in model.stages.iter().enumerate() {
            x = model.conv(&mut tape, &bound, stage, x)?;
            if let Some(aam) = &stage.aam {
                let (y, w) = crate::attention::attend(&mut tape, &bound, x, &aam.attention, branches[si])?;
                let c = sums[si].len();
                for row in tape.value(w).data().chunks(c) {
                    sums[si].iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                x = y;
            }
        }
    }
    for s in &mut sums {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    Ok(sums)
}
