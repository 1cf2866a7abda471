//! The finite-difference suite: one seeded case per primitive plus the full
//! training objective on a micro model.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adaptation::{adapt_forward, AdaptationBlock, RegularizationSubset};
use crate::attention::{attention_weights, AttentionState, Branch};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::layers::{Bound, ParamGroup, ParamStore};
use crate::mmd::{Estimator, KernelSpec};
use crate::model::{AttentionMode, Kernels, Model, ModelConfig, Routing};
use crate::objective::LossWeights;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Name of the composed-objective case.
pub const OBJECTIVE: &str = "objective";

/// Every case name, in execution order.
pub fn case_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = OpKind::ALL
        .iter()
        .filter(|k| **k != OpKind::Leaf)
        .map(|k| k.name())
        .collect();
    names.extend(["attention_weights", "adapt_forward", OBJECTIVE]);
    names
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type CaseFn = dyn FnMut(&mut Tape, &[Var]) -> Result<Var>;

/// Builds the inputs and scalar function of one case.
fn build(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, alloc::boxed::Box<CaseFn>) {
    use alloc::boxed::Box;
    let unary = |rng: &mut ChaCha8Rng, shape: &[usize]| (randn(rng, shape), randn(rng, shape));
    match name {
        "conv2d" => {
            let x = randn(rng, &[2, 3, 8, 8]);
            let w = randn(rng, &[4, 3, 3, 3]);
            let b = randn(rng, &[4]);
            let r1 = randn(rng, &[2, 4, 8, 8]);
            let r2 = randn(rng, &[2, 4, 4, 4]);
            (
                alloc::vec![x, w, b],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y1 = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                    let y2 = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                    let (a, b) = (project(t, y1, &r1)?, project(t, y2, &r2)?);
                    t.add(a, b)
                }),
            )
        }
        "linear" => {
            let (x, w, b) = (randn(rng, &[5, 7]), randn(rng, &[4, 7]), randn(rng, &[4]));
            let r = randn(rng, &[5, 4]);
            (
                alloc::vec![x, w, b],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, &r)
                }),
            )
        }
        "relu" | "sigmoid" | "tanh" => {
            let (x, r) = unary(rng, &[3, 5]);
            let kind = match name {
                "relu" => crate::tape::Activation::Relu,
                "sigmoid" => crate::tape::Activation::Sigmoid,
                _ => crate::tape::Activation::Tanh,
            };
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.activation(v[0], kind);
                    project(t, y, &r)
                }),
            )
        }
        "add" | "sub" | "mul" => {
            let (a, b, r) = (randn(rng, &[3, 4]), randn(rng, &[3, 4]), randn(rng, &[3, 4]));
            let op = name.chars().next().unwrap_or('a');
            (
                alloc::vec![a, b],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = match op {
                        'a' => t.add(v[0], v[1])?,
                        's' => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, &r)
                }),
            )
        }
        "scale" => {
            let (x, r) = unary(rng, &[4, 3]);
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.scale(v[0], -1.75);
                    project(t, y, &r)
                }),
            )
        }
        "sum" | "mean" => {
            let x = randn(rng, &[4, 3]);
            let is_sum = name == "sum";
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    // Square first so the gradient varies by coordinate.
                    let sq = t.mul(v[0], v[0])?;
                    if is_sum {
                        Ok(t.sum(sq))
                    } else {
                        t.mean(sq)
                    }
                }),
            )
        }
        "global_avg_pool" => {
            let (x, r) = (randn(rng, &[2, 3, 4, 5]), randn(rng, &[2, 3]));
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let sq = t.mul(v[0], v[0])?;
                    let y = t.global_avg_pool(sq)?;
                    project(t, y, &r)
                }),
            )
        }
        "channel_scale" => {
            let (x, w, r) = (randn(rng, &[2, 3, 4, 4]), randn(rng, &[2, 3]), randn(rng, &[2, 3, 4, 4]));
            (
                alloc::vec![x, w],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.channel_scale(v[0], v[1])?;
                    project(t, y, &r)
                }),
            )
        }
        "channel_affine" => {
            let (x, s, b, r) = (
                randn(rng, &[2, 3, 4, 4]),
                randn(rng, &[3]),
                randn(rng, &[3]),
                randn(rng, &[2, 3, 4, 4]),
            );
            (
                alloc::vec![x, s, b],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.channel_affine(v[0], v[1], v[2])?;
                    project(t, y, &r)
                }),
            )
        }
        "softmax" => {
            let (x, r) = unary(rng, &[4, 5]);
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.softmax(v[0])?;
                    project(t, y, &r)
                }),
            )
        }
        "cross_entropy" => {
            let x = randn(rng, &[4, 5]);
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[0, 3, 4, 3])),
            )
        }
        "entropy" => {
            let x = uniform(rng, &[4, 5], 0.05, 1.0);
            (alloc::vec![x], Box::new(move |t: &mut Tape, v: &[Var]| t.entropy(v[0])))
        }
        "mmd2" => {
            let (a, b) = (randn(rng, &[6, 3]), randn(rng, &[5, 3]));
            let kernel = KernelSpec::multi_scale(1.3).expect("positive bandwidth");
            (
                alloc::vec![a, b],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let biased = t.mmd2(v[0], v[1], &kernel, Estimator::Biased)?;
                    let unbiased = t.mmd2(v[0], v[1], &kernel, Estimator::Unbiased)?;
                    t.weighted_sum(&[(1.0, biased), (0.5, unbiased)])
                }),
            )
        }
        "gather_rows" => {
            let (x, r) = (randn(rng, &[4, 3]), randn(rng, &[5, 3]));
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
                    project(t, y, &r)
                }),
            )
        }
        "clamp_unit" => {
            let (x, r) = (uniform(rng, &[4, 4], -0.5, 1.5), randn(rng, &[4, 4]));
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.clamp_unit(v[0]);
                    project(t, y, &r)
                }),
            )
        }
        "row_normalize" => {
            let (x, r) = (uniform(rng, &[3, 4], 0.1, 1.0), randn(rng, &[3, 4]));
            (
                alloc::vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.row_normalize(v[0])?;
                    project(t, y, &r)
                }),
            )
        }
        "attention_weights" => {
            let mut store = ParamStore::new();
            let state = AttentionState::new(&mut store, "att", 8, 2, rng).expect("valid state");
            let d = randn(rng, &[3, 8]);
            let r = randn(rng, &[3, 8]);
            let mut inputs = alloc::vec![d];
            inputs.extend(store.values());
            (
                inputs,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let bound = Bound::from_vars(v[1..].to_vec());
                    let ws = attention_weights(t, &bound, v[0], &state, Branch::Source)?;
                    let wt = attention_weights(t, &bound, v[0], &state, Branch::Target)?;
                    let a = project(t, ws, &r)?;
                    let b = t.sum(wt);
                    t.add(a, b)
                }),
            )
        }
        "adapt_forward" => {
            let mut store = ParamStore::new();
            let block = AdaptationBlock::new(&mut store, "block", 5, 0, false, rng);
            *store.get_mut(block.fc2.weight) = randn(rng, &[5, 5]);
            let g = randn(rng, &[4, 5]);
            let r = randn(rng, &[4, 5]);
            let mut inputs = alloc::vec![g];
            inputs.extend(store.values());
            (
                inputs,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let bound = Bound::from_vars(v[1..].to_vec());
                    let y = adapt_forward(t, &bound, v[0], &block)?;
                    project(t, y, &r)
                }),
            )
        }
        _ => objective_case(rng),
    }
}

/// The full objective on a micro model: 4 source and 4 target images of
/// 3×8×8, two stages, one stage routed separately, fixed kernels, every
/// parameter (normalization included) free.
pub fn micro_model(rng: &mut ChaCha8Rng) -> Model {
    let config = ModelConfig {
        in_channels: 3,
        widths: alloc::vec![4, 8],
        hidden: 6,
        classes: 3,
        tau: 16,
        freeze_norm: false,
        attention: AttentionMode::Adaptive,
    };
    let mut model = Model::new(config, rng).expect("valid micro config");
    // Move off the symmetric initialisation so every path carries gradient.
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Frozen)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let t = model.store.get_mut(id);
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += 0.3 * n;
        }
    }
    model
}

fn objective_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, alloc::boxed::Box<CaseFn>) {
    let mut model = micro_model(rng);
    let xs = uniform(rng, &[4, 3, 8, 8], 0.0, 1.0);
    let xt = uniform(rng, &[4, 3, 8, 8], 0.0, 1.0);
    let subset = RegularizationSubset {
        indices: alloc::vec![1, 3],
        inclusion_prob: 0.5,
    };
    let kernels = Kernels::Fixed(alloc::vec![
        KernelSpec::multi_scale(1.0).expect("positive"),
        KernelSpec::multi_scale(0.3).expect("positive"),
    ]);
    let weights = LossWeights { alpha: 1.5, beta: 0.1 };
    let inputs = model.store.values();
    (
        inputs,
        alloc::boxed::Box::new(move |t: &mut Tape, v: &[Var]| {
            let bound = Bound::from_vars(v.to_vec());
            let (s, tt) = (t.constant(xs.clone()), t.constant(xt.clone()));
            let (nodes, _) = model.loss(
                t,
                &bound,
                s,
                &[0, 1, 2, 0],
                tt,
                &subset,
                &weights,
                &kernels,
                Routing::Fixed(&[true, false]),
            )?;
            Ok(nodes.total)
        }),
    )
}

/// Runs the selected cases (all when `selection` is empty). With `fault`
/// set, that primitive's backward pass is deliberately corrupted.
pub fn run_suite(selection: &[&str], fault: Option<OpKind>, opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for name in case_names() {
        if !selection.is_empty() && !selection.contains(&name) {
            continue;
        }
        let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt);
        let (inputs, mut f) = build(name, &mut rng);
        let report = grad_check(
            |tape: &mut Tape, v: &[Var]| {
                if let Some(k) = fault {
                    tape.inject_fault(k);
                }
                f(tape, v)
            },
            &inputs,
            opts,
        )?;
        out.push(CaseResult { name, report });
    }
    Ok(out)
}
