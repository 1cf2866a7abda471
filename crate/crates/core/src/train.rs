//! Training loop: paired mini-batches, momentum SGD with an annealed learning
//! rate and per-group multipliers, per-step loss records and per-epoch
//! accuracies.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::sample_reg_subset_with;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::{accuracy, AttentionMode, Kernels, Model, ModelConfig, Routing};
use crate::objective::{lr_at, total_loss, Anneal, LossComponents, LossWeights};
use crate::optim::{GroupRates, Sgd};
use crate::routing::{EvalRouting, LambdaSchedule, Metric, RouteDecision, RoutingPolicy, DEFAULT_EPS};
use crate::tape::Tape;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: LambdaSchedule,
    pub metric: Metric,
    pub ema_decay: f64,
    pub eval_routing: EvalRouting,
    pub eps: f64,
    pub tau: usize,
    /// Expected size of the regularization subset per class count.
    pub p: f64,
    pub batch_per_domain: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub anneal: Anneal,
    pub epochs: usize,
    pub seed: u64,
    pub classifier_lr_mult: f64,
    pub adapt_lr_mult: f64,
    pub freeze_norm: bool,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub attention: AttentionMode,
    /// Source images used to set the frozen normalization statistics.
    pub calibration_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.5,
            beta: 0.1,
            lambda: LambdaSchedule::Constant(0.2),
            metric: Metric::TanhRatio,
            ema_decay: 0.9,
            eval_routing: EvalRouting::FrozenEma,
            eps: DEFAULT_EPS,
            tau: 16,
            p: 0.6,
            batch_per_domain: 36,
            base_lr: 0.01,
            momentum: 0.9,
            anneal: Anneal::default(),
            epochs: 16,
            seed: 0,
            classifier_lr_mult: 10.0,
            adapt_lr_mult: 0.1,
            freeze_norm: true,
            widths: alloc::vec![16, 32, 64],
            hidden: 64,
            attention: AttentionMode::Adaptive,
            calibration_samples: 144,
        }
    }
}

impl TrainConfig {
    pub fn policy(&self) -> RoutingPolicy {
        RoutingPolicy {
            metric: self.metric,
            lambda: self.lambda.clone(),
            ema_decay: self.ema_decay,
            eval_mode: self.eval_routing,
            eps: self.eps,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            widths: self.widths.clone(),
            hidden: self.hidden,
            classes,
            tau: self.tau,
            freeze_norm: self.freeze_norm,
            attention: self.attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.classifier_lr_mult > 0.0 && self.adapt_lr_mult > 0.0) {
            return bad("learning-rate multipliers must be positive");
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("base_lr must be positive and momentum in [0, 1)");
        }
        if self.batch_per_domain == 0 || self.epochs == 0 {
            return bad("batch_per_domain and epochs must be positive");
        }
        if !(self.anneal.a >= 0.0 && self.anneal.b >= 0.0) {
            return bad("anneal constants must be non-negative");
        }
        self.policy().validate(self.widths.len())
    }
}

/// Loss components and learning rate of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    pub total: f64,
    pub lr: f64,
    pub subset_len: usize,
}

/// Epoch means of the loss components plus end-of-epoch accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    pub total: f64,
    pub src_acc: f64,
    pub tgt_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub decisions: Vec<RouteDecision>,
}

impl TrainOutput {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.metrics.last().expect("at least one epoch")
    }
}

/// Stateful trainer; [`train`] runs it to completion.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    policy: RoutingPolicy,
    source: &'a LabeledImageSet,
    target: &'a LabeledImageSet,
    pub model: Model,
    sgd: Sgd,
    rng: ChaCha8Rng,
    step: usize,
    iters_per_epoch: usize,
    total_steps: usize,
    pub decisions: Vec<RouteDecision>,
    pub steps: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, source: &'a LabeledImageSet, target: &'a LabeledImageSet) -> Result<Self> {
        cfg.validate()?;
        if source.classes != target.classes {
            return Err(Error::InvalidArgument(alloc::format!(
                "source has {} classes, target {}",
                source.classes,
                target.classes
            )));
        }
        if source.is_empty() || target.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Model::new(cfg.model_config(source.classes), &mut rng)?;
        let calib = cfg.calibration_samples.min(source.len());
        if calib > 0 {
            let idx = rand::seq::index::sample(&mut rng, source.len(), calib).into_vec();
            model.calibrate_norm(&source.images.select_rows(&idx))?;
        }
        let sgd = Sgd::new(&model.store, cfg.momentum);
        let iters_per_epoch = (source.len().min(target.len()) / cfg.batch_per_domain).max(1);
        Ok(Trainer {
            policy: cfg.policy(),
            cfg: cfg.clone(),
            source,
            target,
            model,
            sgd,
            rng,
            step: 0,
            iters_per_epoch,
            total_steps: iters_per_epoch * cfg.epochs,
            decisions: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.iters_per_epoch
    }

    /// One optimizer step on a freshly drawn pair of batches.
    pub fn step(&mut self) -> Result<StepRecord> {
        let b = self.cfg.batch_per_domain;
        let s_idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.source.len())).collect();
        let t_idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.target.len())).collect();
        let subset = sample_reg_subset_with(b, self.cfg.p, self.source.classes, &mut self.rng)?;
        let (xs, ys) = self.source.batch(&s_idx);
        let xt = self.target.images.select_rows(&t_idx);

        let q = self.step as f64 / self.total_steps.max(1) as f64;
        let lr = lr_at(q, self.cfg.base_lr, &self.cfg.anneal);
        let rates = GroupRates::scaled(lr, self.cfg.classifier_lr_mult, self.cfg.adapt_lr_mult);

        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape);
        let (xs, xt) = (tape.constant(xs), tape.constant(xt));
        let routing = Routing::Policy {
            policy: &self.policy,
            step: self.step,
        };
        let step = self.step;
        let (nodes, fwd) = self
            .model
            .loss(&mut tape, &bound, xs, &ys, xt, &subset, &self.cfg.weights(), &Kernels::Median, routing)
            .map_err(|e| match e {
                // Softmax rows only stop summing to one once the logits overflow.
                Error::NotADistribution { .. } => Error::Divergence { component: "L_e", step },
                e => e,
            })?;
        let scalar = |v| tape.value(v).data()[0];
        let comps = LossComponents {
            l_s: scalar(nodes.l_s),
            l_m: scalar(nodes.l_m),
            l_reg: scalar(nodes.l_reg),
            l_e: scalar(nodes.l_e),
        };
        let total = total_loss(&comps, &self.cfg.weights(), self.step)?;
        let grads = tape.backward(nodes.total)?;
        self.sgd.step(&mut self.model.store, &bound, &grads, &rates)?;
        self.decisions.extend(fwd.decisions);
        let record = StepRecord {
            step: self.step,
            l_s: comps.l_s,
            l_m: comps.l_m,
            l_reg: comps.l_reg,
            l_e: comps.l_e,
            total,
            lr,
            subset_len: subset.len(),
        };
        self.steps.push(record.clone());
        self.step += 1;
        Ok(record)
    }

    /// Source and target accuracy over the full sets.
    pub fn evaluate(&mut self) -> Result<(f64, f64)> {
        let (ps, pt) = self
            .model
            .predict(&self.source.images, &self.target.images, &self.policy, EVAL_CHUNK)?;
        Ok((accuracy(&ps, &self.source.labels), accuracy(&pt, &self.target.labels)))
    }

    pub fn run(self) -> Result<TrainOutput> {
        self.run_with(|_| {})
    }

    /// Runs every epoch, handing each epoch's metrics to `on_epoch`.
    pub fn run_with(mut self, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutput> {
        let mut metrics = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let mut sums = [0.0; 5];
            let mut lr = 0.0;
            for _ in 0..self.iters_per_epoch {
                let r = self.step()?;
                for (s, v) in sums.iter_mut().zip([r.l_s, r.l_m, r.l_reg, r.l_e, r.total]) {
                    *s += v;
                }
                lr = r.lr;
            }
            let n = self.iters_per_epoch as f64;
            let (src_acc, tgt_acc) = self.evaluate()?;
            let m = EpochMetrics {
                epoch,
                l_s: sums[0] / n,
                l_m: sums[1] / n,
                l_reg: sums[2] / n,
                l_e: sums[3] / n,
                total: sums[4] / n,
                src_acc,
                tgt_acc,
                lr,
            };
            on_epoch(&m);
            metrics.push(m);
        }
        Ok(TrainOutput {
            model: self.model,
            metrics,
            steps: self.steps,
            decisions: self.decisions,
        })
    }
}

/// Trains a fresh model; deterministic in `cfg.seed`. Target labels are only
/// read for the reported accuracy.
pub fn train(cfg: &TrainConfig, source: &LabeledImageSet, target: &LabeledImageSet) -> Result<TrainOutput> {
    Trainer::new(cfg, source, target)?.run()
}
