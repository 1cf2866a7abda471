//! Loss terms of the training objective and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};

/// Rows of a probability matrix must sum to one within this tolerance.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

/// Mean cross-entropy of source logits against labels in `0..C_n`.
pub fn source_ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean prediction entropy of target probability rows.
pub fn target_entropy_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let t = tape.value(probs);
    if t.rank() != 2 {
        return Err(Error::shape("target_entropy_loss", alloc::format!("{:?}", t.shape())));
    }
    let k = t.shape()[1].max(1);
    for (row, values) in t.data().chunks(k).enumerate() {
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL || values.iter().any(|&v| v < 0.0) {
            return Err(Error::NotADistribution { row, sum });
        }
    }
    tape.entropy(probs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_s: f64,
    pub l_m: f64,
    pub l_reg: f64,
    pub l_e: f64,
}

/// `L_s + α(L_M + L_reg) + β·L_e`; a non-finite component is reported as
/// divergence at `step`.
pub fn total_loss(c: &LossComponents, w: &LossWeights, step: usize) -> Result<f64> {
    for (name, v) in [("L_s", c.l_s), ("L_M", c.l_m), ("L_reg", c.l_reg), ("L_e", c.l_e)] {
        if !v.is_finite() {
            return Err(Error::Divergence { component: name, step });
        }
    }
    Ok(c.l_s + w.alpha * (c.l_m + c.l_reg) + w.beta * c.l_e)
}

/// Tape version of [`total_loss`].
pub fn total_loss_node(tape: &mut Tape, l_s: Var, l_m: Var, l_reg: Var, l_e: Var, w: &LossWeights) -> Result<Var> {
    tape.weighted_sum(&[(1.0, l_s), (w.alpha, l_m), (w.alpha, l_reg), (w.beta, l_e)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anneal {
    pub a: f64,
    pub b: f64,
}

impl Default for Anneal {
    fn default() -> Self {
        Anneal { a: 10.0, b: 0.75 }
    }
}

/// `base_lr · (1 + a·q)^(-b)` at training progress `q ∈ [0, 1]`.
pub fn lr_at(q: f64, base_lr: f64, anneal: &Anneal) -> f64 {
    let q = q.clamp(0.0, 1.0);
    base_lr * math::powf(1.0 + anneal.a * q, -anneal.b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ce_examples() {
        let mut tape = Tape::new();
        let confident = tape.constant(Tensor::from_rows(&[&[0.0, 800.0]]).unwrap());
        let l = source_ce_loss(&mut tape, confident, &[1]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let uniform = tape.constant(Tensor::zeros(&[4, 31]));
        let l = source_ce_loss(&mut tape, uniform, &[0, 5, 30, 2]).unwrap();
        assert!((tape.value(l).data()[0] - 3.4339872044851463).abs() < 1e-12);
        let uniform = tape.constant(Tensor::zeros(&[2, 2]));
        let l = source_ce_loss(&mut tape, uniform, &[0, 1]).unwrap();
        assert!((tape.value(l).data()[0] - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let mut tape = Tape::new();
        let onehot = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap());
        let l = target_entropy_loss(&mut tape, onehot).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let uniform = tape.constant(Tensor::full(&[3, 12], 1.0 / 12.0));
        let l = target_entropy_loss(&mut tape, uniform).unwrap();
        assert!((tape.value(l).data()[0] - 2.4849066497880004).abs() < 1e-12);
        let bad = tape.constant(Tensor::from_rows(&[&[0.5, 0.6]]).unwrap());
        assert!(matches!(target_entropy_loss(&mut tape, bad), Err(Error::NotADistribution { row: 0, .. })));
    }

    #[test]
    fn total_examples() {
        let c = LossComponents {
            l_s: 1.0,
            l_m: 0.2,
            l_reg: 0.1,
            l_e: 0.5,
        };
        let w = LossWeights { alpha: 1.5, beta: 0.1 };
        assert!((total_loss(&c, &w, 0).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(total_loss(&c, &LossWeights { alpha: 0.0, beta: 0.0 }, 0).unwrap(), 1.0);
        let twice = LossWeights { alpha: 3.0, beta: 0.1 };
        let base = total_loss(&c, &LossWeights { alpha: 0.0, beta: 0.1 }, 0).unwrap();
        let a1 = total_loss(&c, &w, 0).unwrap() - base;
        let a2 = total_loss(&c, &twice, 0).unwrap() - base;
        assert!((a2 - 2.0 * a1).abs() < 1e-12);
        let nan = LossComponents { l_e: f64::NAN, ..c };
        assert_eq!(total_loss(&nan, &w, 7), Err(Error::Divergence { component: "L_e", step: 7 }));
    }

    #[test]
    fn schedule_examples() {
        let an = Anneal::default();
        assert_eq!(lr_at(0.0, 0.01, &an), 0.01);
        assert!((lr_at(1.0, 0.01, &an) - 0.0016556002607617).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = lr_at(i as f64 / 1000.0, 0.01, &an);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
