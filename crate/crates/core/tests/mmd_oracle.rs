use gdcan_core::mmd::{gaussian_gram, median_bandwidth, mmd2, Estimator, KernelSpec};
use gdcan_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let w = 1.0 / spec.bandwidths().len() as f64;
    spec.bandwidths().iter().map(|s| w * (-d2 / (2.0 * s * s)).exp()).sum()
}

/// Pair-by-pair summation, written independently of the library.
fn oracle(a: &Tensor, b: &Tensor, spec: &KernelSpec, unbiased: bool) -> f64 {
    let mean_over = |x: &Tensor, y: &Tensor, skip_diag: bool| {
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                if skip_diag && i == j {
                    continue;
                }
                sum += kernel(spec, x.row(i), y.row(j));
                count += 1;
            }
        }
        sum / count as f64
    };
    mean_over(a, a, unbiased) + mean_over(b, b, unbiased) - 2.0 * mean_over(a, b, false)
}

#[test]
fn matches_double_loop_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(2..=10);
        let m = rng.random_range(2..=10);
        let d = rng.random_range(1..=5);
        let a = randn(&mut rng, n, d);
        let b = randn(&mut rng, m, d);
        let spec = KernelSpec::multi_scale(rng.random_range(0.3..3.0)).unwrap();
        for (est, unbiased) in [(Estimator::Biased, false), (Estimator::Unbiased, true)] {
            let got = mmd2(&a, &b, &spec, est).unwrap();
            let want = oracle(&a, &b, &spec, unbiased);
            assert!((got - want).abs() <= 1e-12, "{est:?}: {got} vs {want}");
        }
    }
}

#[test]
fn tape_value_matches_plain_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (randn(&mut rng, 7, 3), randn(&mut rng, 5, 3));
    let spec = KernelSpec::multi_scale(1.3).unwrap();
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let v = tape.mmd2(va, vb, &spec, Estimator::Biased).unwrap();
    let plain = mmd2(&a, &b, &spec, Estimator::Biased).unwrap();
    assert!((tape.value(v).data()[0] - plain).abs() <= 1e-14);
}

#[test]
fn biased_self_distance_is_exactly_zero() {
    let a = randn(&mut ChaCha8Rng::seed_from_u64(5), 9, 4);
    assert_eq!(mmd2(&a, &a, &KernelSpec::multi_scale(0.7).unwrap(), Estimator::Biased).unwrap(), 0.0);
}

#[test]
fn closed_form_two_points() {
    let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let v = mmd2(&a, &b, &KernelSpec::single(1.0).unwrap(), Estimator::Biased).unwrap();
    assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() <= 1e-9);
    let g = gaussian_gram(&a, &b, &KernelSpec::single(1.0).unwrap()).unwrap();
    assert!((g.data()[0] - 0.6065307).abs() < 1e-7);
}

#[test]
fn median_heuristic_enumeration() {
    let x = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
    assert!((median_bandwidth(&x).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
}

// Same-distribution draws: the unbiased estimate averages to zero.
#[test]
fn unbiased_estimator_has_zero_mean_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = KernelSpec::multi_scale(1.0).unwrap();
    let draws: Vec<f64> = (0..2000)
        .map(|_| {
            let (a, b) = (randn(&mut rng, 6, 2), randn(&mut rng, 6, 2));
            mmd2(&a, &b, &spec, Estimator::Unbiased).unwrap()
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean}, se {se}");
}

fn matrix(max_rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows).prop_flat_map(move |rows| {
        prop::collection::vec(-3.0..3.0f64, rows * cols)
            .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
    })
}

proptest! {
    #[test]
    fn biased_is_non_negative_and_symmetric(a in matrix(8, 3), b in matrix(8, 3), sigma in 0.1..5.0f64) {
        let spec = KernelSpec::multi_scale(sigma).unwrap();
        let ab = mmd2(&a, &b, &spec, Estimator::Biased).unwrap();
        let ba = mmd2(&b, &a, &spec, Estimator::Biased).unwrap();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn doubling_kernel_weights_doubles_the_value(a in matrix(6, 2), b in matrix(6, 2)) {
        let spec = KernelSpec::multi_scale(1.0).unwrap();
        let one = mmd2(&a, &b, &spec, Estimator::Biased).unwrap();
        let two = mmd2(&a, &b, &spec.scaled(2.0), Estimator::Biased).unwrap();
        prop_assert!((two - 2.0 * one).abs() <= 1e-12);
    }

    #[test]
    fn gram_entries_lie_in_unit_interval(a in matrix(5, 2), b in matrix(5, 2), sigma in 0.1..5.0f64) {
        let g = gaussian_gram(&a, &b, &KernelSpec::single(sigma).unwrap()).unwrap();
        prop_assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
