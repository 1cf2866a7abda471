//! SGD with momentum and per-group learning rates.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Bound, ParamGroup, ParamStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// `v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            alloc::format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Learning rate of each parameter group for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub backbone: f64,
    pub classifier: f64,
    pub adaptation: f64,
}

impl GroupRates {
    pub fn scaled(base: f64, classifier_mult: f64, adapt_mult: f64) -> Self {
        GroupRates {
            backbone: base,
            classifier: base * classifier_mult,
            adaptation: base * adapt_mult,
        }
    }

    pub fn rate(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Backbone => Some(self.backbone),
            ParamGroup::Classifier => Some(self.classifier),
            ParamGroup::Adaptation => Some(self.adaptation),
            ParamGroup::Frozen => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocities: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Applies one update to every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, rates: &GroupRates) -> Result<()> {
        if self.velocities.len() != store.len() {
            return Err(Error::shape("sgd_step", "optimizer state does not match the store"));
        }
        for ((id, p), v) in store.iter_mut().zip(self.velocities.iter_mut()) {
            let Some(lr) = rates.rate(p.group) else { continue };
            let Some(g) = grads.get(bound.var(id)) else { continue };
            sgd_update(p.value.data_mut(), g.data(), v.data_mut(), lr, self.momentum)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let (mut p, mut v) = ([0.0], [0.0]);
        sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p, [-1.0]);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let (mut p, mut v) = ([0.25, -3.0], [0.0, 0.0]);
        for _ in 0..100 {
            sgd_update(&mut p, &[0.0, 0.0], &mut v, 0.5, 0.9).unwrap();
        }
        assert_eq!(p, [0.25, -3.0]);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let (mut p, mut v) = ([0.0], [0.0]);
        sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.9).unwrap();
        sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.9).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let (mut p, mut v) = ([0.0, 1.0], [0.0, 0.0]);
        assert!(sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.9).is_err());
    }

    #[test]
    fn group_rate_ratios() {
        let r = GroupRates::scaled(0.01, 10.0, 0.1);
        assert_eq!(r.rate(ParamGroup::Frozen), None);
        assert!((r.classifier / r.backbone - 10.0).abs() < 1e-12);
        assert!((r.adaptation / r.backbone - 0.1).abs() < 1e-12);
    }
}
