//! Gaussian-kernel maximum mean discrepancy.
//!
//! All functions treat the leading axis of a tensor as the sample axis and
//! flatten the remaining axes into the feature vector.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// A weighted sum of Gaussian kernels `Σ_k w_k exp(-‖x-y‖² / (2σ_k²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Biased,
    Unbiased,
}

/// Bandwidth multipliers of the default multi-kernel family.
pub const MULTI_SCALE: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl KernelSpec {
    /// Equal-weight mixture (the mean over kernels).
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        let k = bandwidths.len();
        Self::with_weights(bandwidths, vec![1.0 / k.max(1) as f64; k])
    }

    pub fn with_weights(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidArgument("kernel needs at least one bandwidth".into()));
        }
        if bandwidths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("bandwidths must be positive and finite".into()));
        }
        if weights.len() != bandwidths.len() {
            return Err(Error::InvalidArgument("one weight per bandwidth".into()));
        }
        Ok(KernelSpec {
            bandwidths,
            weights,
        })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    /// Five kernels at `σ/4, σ/2, σ, 2σ, 4σ`.
    pub fn multi_scale(sigma: f64) -> Result<Self> {
        Self::new(MULTI_SCALE.iter().map(|m| m * sigma).collect())
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same bandwidths with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        KernelSpec {
            bandwidths: self.bandwidths.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    /// Kernel value for a squared distance.
    #[inline]
    pub fn eval(&self, sq_dist: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * math::exp(-sq_dist / (2.0 * s * s)))
            .sum()
    }

    /// Kernel value and `∂k/∂x` expressed as a multiple of `(x - y)`.
    #[inline]
    fn eval_with_slope(&self, sq_dist: f64) -> (f64, f64) {
        let mut value = 0.0;
        let mut slope = 0.0;
        for (s, w) in self.bandwidths.iter().zip(&self.weights) {
            let s2 = s * s;
            let e = w * math::exp(-sq_dist / (2.0 * s2));
            value += e;
            slope -= e / s2;
        }
        (value, slope)
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_dims(a: &Tensor, b: &Tensor) -> Result<usize> {
    let d = a.row_len();
    if d != b.row_len() {
        return Err(Error::shape(
            "mmd",
            alloc::format!("feature dims {} and {}", d, b.row_len()),
        ));
    }
    Ok(d)
}

/// Gram matrix `K[i, j] = k(a_i, b_j)`.
pub fn gaussian_gram(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<Tensor> {
    check_dims(a, b)?;
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(spec.eval(sq_dist(a.row(i), b.row(j))));
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Squared MMD between the empirical distributions of the rows of `a` and `b`.
pub fn mmd2(a: &Tensor, b: &Tensor, spec: &KernelSpec, estimator: Estimator) -> Result<f64> {
    mmd2_with_grad(a, b, spec, estimator, false).map(|(v, _)| v)
}

pub(crate) struct MmdGrad {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Value of the squared MMD and, when asked, its gradient with respect to
/// both sample sets. Written as `Σ c_xy k(x, y)` over all ordered pairs of
/// the pooled set, with coefficients depending on which side each point is on.
pub(crate) fn mmd2_with_grad(
    a: &Tensor,
    b: &Tensor,
    spec: &KernelSpec,
    estimator: Estimator,
    want_grad: bool,
) -> Result<(f64, Option<MmdGrad>)> {
    let d = check_dims(a, b)?;
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::EmptyBatch);
    }
    let (c_aa, c_bb) = match estimator {
        Estimator::Biased => (1.0 / (n * n) as f64, 1.0 / (m * m) as f64),
        Estimator::Unbiased => {
            if n < 2 || m < 2 {
                return Err(Error::InvalidArgument(
                    "unbiased MMD needs at least two samples per side".into(),
                ));
            }
            (1.0 / (n * (n - 1)) as f64, 1.0 / (m * (m - 1)) as f64)
        }
    };
    let c_ab = -2.0 / (n * m) as f64;
    let skip_diag = estimator == Estimator::Unbiased;

    let mut grad = want_grad.then(|| MmdGrad {
        a: vec![0.0; n * d],
        b: vec![0.0; m * d],
    });

    // Raw kernel sum over ordered pairs; gradients land on both sides. Every
    // block runs the same loop order so that mmd2(A, A) cancels exactly.
    let block = |x: &Tensor, y: &Tensor, coef: f64, within: bool, gx: Option<&mut Vec<f64>>, gy: Option<&mut Vec<f64>>| {
        let (mut gx, mut gy) = (gx, gy);
        let mut total = 0.0;
        for i in 0..x.rows() {
            let xi = x.row(i);
            for j in 0..y.rows() {
                if within && skip_diag && i == j {
                    continue;
                }
                let yj = y.row(j);
                let (k, slope) = spec.eval_with_slope(sq_dist(xi, yj));
                total += k;
                let f = coef * slope;
                for t in 0..d {
                    let diff = xi[t] - yj[t];
                    if let Some(g) = gx.as_deref_mut() {
                        g[i * d + t] += f * diff;
                    }
                    if let Some(g) = gy.as_deref_mut() {
                        g[j * d + t] -= f * diff;
                    }
                }
            }
        }
        coef * total
    };
    let value = match grad.as_mut() {
        Some(g) => {
            let mut ga2 = vec![0.0; n * d];
            let mut gb2 = vec![0.0; m * d];
            let aa = block(a, a, c_aa, true, Some(&mut g.a), Some(&mut ga2));
            let bb = block(b, b, c_bb, true, Some(&mut g.b), Some(&mut gb2));
            let ab = block(a, b, c_ab, false, Some(&mut g.a), Some(&mut g.b));
            for (x, y) in g.a.iter_mut().zip(&ga2) {
                *x += y;
            }
            for (x, y) in g.b.iter_mut().zip(&gb2) {
                *x += y;
            }
            aa + bb + ab
        }
        None => block(a, a, c_aa, true, None, None) + block(b, b, c_bb, true, None, None) + block(a, b, c_ab, false, None, None),
    };
    Ok((value, grad))
}

/// Median-heuristic bandwidth: `σ² = median(‖x_i - x_j‖²) / 2` over distinct
/// pairs. Falls back to `σ = 1` when the median distance is zero.
pub fn median_bandwidth(pooled: &Tensor) -> Result<f64> {
    let n = pooled.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "median bandwidth needs at least two rows".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(pooled.row(i), pooled.row(j)));
        }
    }
    let med = math::median(&mut dists).unwrap_or(0.0);
    if med > 0.0 && med.is_finite() {
        Ok(math::sqrt(med / 2.0))
    } else {
        Ok(1.0)
    }
}

/// Median bandwidth of the union of two sample sets.
pub fn pooled_median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_dims(a, b)?;
    let flat_a = Tensor::new(vec![a.rows(), a.row_len()], a.data().to_vec())?;
    let flat_b = Tensor::new(vec![b.rows(), b.row_len()], b.data().to_vec())?;
    median_bandwidth(&Tensor::concat_rows(&[&flat_a, &flat_b])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn gram_of_coincident_points_is_one() {
        let spec = KernelSpec::multi_scale(0.7).unwrap();
        let a = Tensor::from_rows(&[&[1.0, -2.0]]).unwrap();
        let k = gaussian_gram(&a, &a, &spec).unwrap();
        assert!((k.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gram_closed_form_single_pair() {
        let spec = KernelSpec::single(1.0).unwrap();
        let k = gaussian_gram(&col(&[0.0]), &col(&[1.0]), &spec).unwrap();
        assert!((k.data()[0] - 0.6065306597126334).abs() < 1e-12);
    }

    #[test]
    fn gram_is_symmetric_under_swap() {
        let spec = KernelSpec::multi_scale(1.3).unwrap();
        let a = Tensor::from_rows(&[&[0.1, 0.2], &[1.0, -1.0], &[0.5, 0.5]]).unwrap();
        let b = Tensor::from_rows(&[&[0.3, 0.0], &[2.0, 1.0]]).unwrap();
        let kab = gaussian_gram(&a, &b, &spec).unwrap();
        let kba = gaussian_gram(&b, &a, &spec).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(kab.data()[i * 2 + j], kba.data()[j * 3 + i]);
            }
        }
    }

    #[test]
    fn gram_rejects_dimension_mismatch() {
        let spec = KernelSpec::single(1.0).unwrap();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(matches!(gaussian_gram(&a, &b, &spec), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mmd_closed_form_single_points() {
        let spec = KernelSpec::single(1.0).unwrap();
        let v = mmd2(&col(&[0.0]), &col(&[1.0]), &spec, Estimator::Biased).unwrap();
        assert!((v - 0.7869386805747332).abs() < 1e-12);
    }

    #[test]
    fn mmd_of_identical_sets_is_exactly_zero() {
        let spec = KernelSpec::multi_scale(0.9).unwrap();
        let a = Tensor::from_rows(&[&[0.1, 0.2], &[1.0, -1.0], &[0.5, 0.5]]).unwrap();
        assert_eq!(mmd2(&a, &a, &spec, Estimator::Biased).unwrap(), 0.0);
    }

    #[test]
    fn unbiased_needs_two_samples() {
        let spec = KernelSpec::single(1.0).unwrap();
        assert!(mmd2(&col(&[0.0]), &col(&[1.0, 2.0]), &spec, Estimator::Unbiased).is_err());
        assert!(mmd2(&col(&[0.0, 0.5]), &col(&[1.0, 2.0]), &spec, Estimator::Unbiased).is_ok());
    }

    #[test]
    fn median_bandwidth_enumeration() {
        // squared distances {1, 1, 4}: median 1, σ² = 0.5
        let s = median_bandwidth(&col(&[0.0, 1.0, 2.0])).unwrap();
        assert!((s * s - 0.5).abs() < 1e-15);
        let s = median_bandwidth(&col(&[0.0, 3.0])).unwrap();
        assert!((s * s - 4.5).abs() < 1e-12);
        assert_eq!(median_bandwidth(&col(&[2.0, 2.0, 2.0])).unwrap(), 1.0);
        assert!(median_bandwidth(&col(&[2.0])).is_err());
    }

    #[test]
    fn scaled_weights_scale_the_kernel() {
        let spec = KernelSpec::multi_scale(1.0).unwrap();
        let twice = spec.scaled(2.0);
        assert!((twice.eval(0.7) - 2.0 * spec.eval(0.7)).abs() < 1e-15);
    }
}
