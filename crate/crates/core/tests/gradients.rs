use std::time::Instant;

use gdcan_core::checks::{case_names, run_suite, OBJECTIVE};
use gdcan_core::gradcheck::{grad_check, GradCheckOptions};
use gdcan_core::tape::{Activation, OpKind, Var};
use gdcan_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn every_case_passes_within_budget() {
    let start = Instant::now();
    let results = run_suite(&[], None, &GradCheckOptions::default()).unwrap();
    assert_eq!(results.len(), case_names().len());
    for r in &results {
        assert!(r.report.checked > 0, "{} probed nothing", r.name);
        assert!(r.report.pass, "{}: {:?}", r.name, r.report.worst);
        assert!(r.report.max_rel_error <= 1e-4);
    }
    assert!(results.iter().any(|r| r.name == OBJECTIVE));
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn conv_input_gradient_of_output_sum() {
    let x = randn(1, &[2, 3, 8, 8]);
    let w = randn(2, &[4, 3, 3, 3]);
    let b = Tensor::zeros(&[4]);
    let report = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(v[0], w, b, 1, 1)?;
            Ok(t.sum(y))
        },
        &[x],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.pass, "{:?}", report.worst);
    assert_eq!(report.checked, 2 * 3 * 8 * 8);
}

#[test]
fn injected_faults_are_caught() {
    for kind in OpKind::ALL.iter().copied().filter(|k| *k != OpKind::Leaf) {
        let results = run_suite(&[kind.name()], Some(kind), &GradCheckOptions::default()).unwrap();
        assert_eq!(results.len(), 1);
        assert!(!results[0].report.pass, "fault in {} went unnoticed", kind.name());
    }
}

#[test]
fn unknown_selection_runs_nothing() {
    assert!(run_suite(&["no_such_case"], None, &GradCheckOptions::default()).unwrap().is_empty());
}

fn grads_of(x: &Tensor, a: f64, b: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let f = tape.activation(v, Activation::Tanh);
    let f = tape.sum(f);
    let sq = tape.mul(v, v).unwrap();
    let g = tape.sum(sq);
    let out = tape.weighted_sum(&[(a, f), (b, g)]).unwrap();
    tape.backward(out).unwrap().get(v).unwrap().data().to_vec()
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_output(
        data in prop::collection::vec(-2.0..2.0f64, 6),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let x = Tensor::new(vec![2, 3], data).unwrap();
        let combined = grads_of(&x, a, b);
        let (ga, gb) = (grads_of(&x, 1.0, 0.0), grads_of(&x, 0.0, 1.0));
        for i in 0..6 {
            prop_assert!((combined[i] - (a * ga[i] + b * gb[i])).abs() <= 1e-12);
        }
    }
}
