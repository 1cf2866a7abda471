//! Skip-connected feature adaptation for the target stream.
//!
//! A block computes `Ĝ = G + fc2(relu(fc1(G)))`. The alignment loss matches
//! source features against adapted target features layer by layer; the
//! regularization loss sends a random source subset through the same blocks
//! and matches it against every class-conditional source embedding.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Affine, Bound, ParamGroup, ParamStore};
use crate::mmd::{Estimator, KernelSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationBlock {
    pub fc1: Affine,
    /// Zero at initialisation, so the block starts as the identity.
    pub fc2: Affine,
    pub layer_index: usize,
    /// Output is clamped to `[0, 1]` and row-normalised (post-softmax layer).
    pub probability_space: bool,
}

impl AdaptationBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layer_index: usize,
        probability_space: bool,
        rng: &mut R,
    ) -> Self {
        let group = ParamGroup::Adaptation;
        AdaptationBlock {
            fc1: Affine::new(store, &alloc::format!("{name}.fc1"), dim, dim, group, rng),
            fc2: Affine::zeros(store, &alloc::format!("{name}.fc2"), dim, dim, group),
            layer_index,
            probability_space,
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.input_dim
    }

    /// `Ĝ`, including re-normalisation for probability-space blocks.
    pub fn apply(&self, tape: &mut Tape, bound: &Bound, g: Var) -> Result<Var> {
        let out = adapt_forward(tape, bound, g, self)?;
        if self.probability_space {
            let clamped = tape.clamp_unit(out);
            tape.row_normalize(clamped)
        } else {
            Ok(out)
        }
    }
}

/// `G + fc2(relu(fc1(G)))`.
pub fn adapt_forward(tape: &mut Tape, bound: &Bound, g: Var, block: &AdaptationBlock) -> Result<Var> {
    let s = tape.value(g).shape();
    if s.len() != 2 || s[1] != block.dim() {
        return Err(Error::shape(
            "adapt_forward",
            alloc::format!("block width {}, features {:?}", block.dim(), s),
        ));
    }
    let h = block.fc1.forward(tape, bound, g)?;
    let h = tape.relu(h);
    let delta = block.fc2.forward(tape, bound, h)?;
    tape.add(g, delta)
}

/// `Σ_l MMD²(G_l(X_s), Ĝ_l(X_t))` where the target features have already
/// been adapted.
pub fn alignment_loss_adapted(tape: &mut Tape, source: &[Var], adapted_target: &[Var], kernels: &[KernelSpec]) -> Result<Var> {
    if source.len() != adapted_target.len() || source.len() != kernels.len() || source.is_empty() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} source layers, {} target layers, {} kernels",
            source.len(),
            adapted_target.len(),
            kernels.len()
        )));
    }
    let mut terms = Vec::with_capacity(source.len());
    for ((&s, &t), k) in source.iter().zip(adapted_target).zip(kernels) {
        terms.push((1.0, tape.mmd2(s, t, k, Estimator::Biased)?));
    }
    tape.weighted_sum(&terms)
}

/// Alignment loss with each layer's target features passed through its block.
pub fn alignment_loss(
    tape: &mut Tape,
    bound: &Bound,
    source: &[Var],
    target: &[Var],
    blocks: &[AdaptationBlock],
    kernels: &[KernelSpec],
) -> Result<Var> {
    if target.len() != blocks.len() {
        return Err(Error::InvalidArgument("one adaptation block per layer".into()));
    }
    let adapted = target
        .iter()
        .zip(blocks)
        .map(|(&t, b)| b.apply(tape, bound, t))
        .collect::<Result<Vec<_>>>()?;
    alignment_loss_adapted(tape, source, &adapted, kernels)
}

/// Source indices routed through the target path for one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationSubset {
    pub indices: Vec<usize>,
    pub inclusion_prob: f64,
}

impl RegularizationSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn inclusion_prob(p: f64, classes: usize) -> Result<f64> {
    if classes == 0 || !(0.0..=classes as f64).contains(&p) {
        return Err(Error::InvalidArgument(alloc::format!(
            "p = {p} must lie in [0, {classes}]"
        )));
    }
    Ok((p / classes as f64).clamp(0.0, 1.0))
}

/// Includes each of `batch_size` indices independently with probability
/// `p / classes`.
pub fn sample_reg_subset(batch_size: usize, p: f64, classes: usize, seed: u64) -> Result<RegularizationSubset> {
    sample_reg_subset_with(batch_size, p, classes, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_reg_subset_with<R: Rng + ?Sized>(
    batch_size: usize,
    p: f64,
    classes: usize,
    rng: &mut R,
) -> Result<RegularizationSubset> {
    let prob = inclusion_prob(p, classes)?;
    let indices = (0..batch_size).filter(|_| rng.random::<f64>() < prob).collect();
    Ok(RegularizationSubset {
        indices,
        inclusion_prob: prob,
    })
}

/// Row indices of each class present in `labels`.
pub fn class_members(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = alloc::vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        members[l].push(i);
    }
    Ok(members)
}

/// `Σ_l Σ_k ‖mean_{S_k} h(G_l(x)) - mean_R h(Ĝ_l(x))‖²`, with the adapted
/// subset features already computed per layer. Classes absent from the batch
/// are skipped; an empty subset contributes zero.
pub fn regularization_loss_adapted(
    tape: &mut Tape,
    source: &[Var],
    labels: &[usize],
    adapted_subset: &[Var],
    subset_len: usize,
    kernels: &[KernelSpec],
    classes: usize,
) -> Result<Var> {
    if source.len() != adapted_subset.len() || source.len() != kernels.len() {
        return Err(Error::InvalidArgument("layer counts differ".into()));
    }
    let members = class_members(labels, classes)?;
    if subset_len == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::new();
    for ((&g, &r), k) in source.iter().zip(adapted_subset).zip(kernels) {
        if tape.value(g).rows() != labels.len() {
            return Err(Error::shape("regularization_loss", "one label per source row"));
        }
        for rows in members.iter().filter(|m| !m.is_empty()) {
            let class_rows = tape.gather_rows(g, rows)?;
            terms.push((1.0, tape.mmd2(class_rows, r, k, Estimator::Biased)?));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.weighted_sum(&terms)
}

/// Regularization loss with each layer's subset features taken from the
/// source features of that layer and passed through its block.
#[allow(clippy::too_many_arguments)]
pub fn regularization_loss(
    tape: &mut Tape,
    bound: &Bound,
    source: &[Var],
    labels: &[usize],
    subset: &RegularizationSubset,
    blocks: &[AdaptationBlock],
    kernels: &[KernelSpec],
    classes: usize,
) -> Result<Var> {
    if source.len() != blocks.len() {
        return Err(Error::InvalidArgument("one adaptation block per layer".into()));
    }
    if subset.is_empty() {
        class_members(labels, classes)?;
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut adapted = Vec::with_capacity(source.len());
    for (&g, b) in source.iter().zip(blocks) {
        let rows = tape.gather_rows(g, &subset.indices)?;
        adapted.push(b.apply(tape, bound, rows)?);
    }
    regularization_loss_adapted(tape, source, labels, &adapted, subset.len(), kernels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(dim: usize) -> (ParamStore, AdaptationBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let b = AdaptationBlock::new(&mut store, "blk", dim, 1, false, &mut rng);
        (store, b)
    }

    #[test]
    fn zero_init_is_identity() {
        let (store, b) = block(3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.constant(Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[4.0, 0.0, -0.5]]).unwrap());
        let out = adapt_forward(&mut tape, &bound, g, &b).unwrap();
        assert_eq!(tape.value(out), tape.value(g));
    }

    #[test]
    fn constructed_cancellation() {
        let (mut store, b) = block(2);
        let eye = Tensor::new(alloc::vec![2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *store.get_mut(b.fc1.weight) = eye.clone();
        store.get_mut(b.fc1.bias).data_mut().fill(0.0);
        *store.get_mut(b.fc2.weight) = eye.map(|v| -v);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.constant(Tensor::from_rows(&[&[0.5, 2.0], &[0.0, 1.0]]).unwrap());
        let out = adapt_forward(&mut tape, &bound, g, &b).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subset_extremes() {
        for seed in 0..20 {
            assert!(sample_reg_subset(36, 0.0, 10, seed).unwrap().is_empty());
            assert_eq!(sample_reg_subset(36, 10.0, 10, seed).unwrap().len(), 36);
        }
        assert!(sample_reg_subset(36, 11.0, 10, 0).is_err());
    }

    #[test]
    fn probability_block_output_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let b = AdaptationBlock::new(&mut store, "p", 3, 2, true, &mut rng);
        for v in store.get_mut(b.fc2.weight).data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.constant(Tensor::from_rows(&[&[0.2, 0.3, 0.5], &[0.9, 0.05, 0.05]]).unwrap());
        let out = b.apply(&mut tape, &bound, g).unwrap();
        for row in tape.value(out).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
