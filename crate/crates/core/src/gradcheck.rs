//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Absolute differences at or below this are not counted as errors.
    pub abs_floor: f64,
    /// Probe at most this many coordinates per input (chosen with `seed`).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tol: 1e-4,
            abs_floor: 1e-8,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    pub checked: usize,
    /// `(input, index)` pairs whose probes straddled a kink (relu or clamp
    /// changed branch); excluded from the error statistics.
    pub nondifferentiable: Vec<(usize, usize)>,
    pub worst: Option<CoordinateError>,
}

fn evaluate<F>(f: &mut F, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalar(tape.value(out).shape().to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of a scalar function with central differences
/// `(f(θ+h·e_i) - f(θ-h·e_i)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let (tape, vars, out) = evaluate(&mut f, inputs, true)?;
    let base_signature = tape.kink_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.data().to_vec(),
            None => alloc::vec![0.0; t.len()],
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        checked: 0,
        nondifferentiable: Vec::new(),
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < input.len() => {
                let mut c = rand::seq::index::sample(&mut rng, input.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let (tp, _, op) = evaluate(&mut f, &probe, false)?;
            let (fp, sp) = (tp.value(op).data()[0], tp.kink_signature());
            drop(tp);
            probe[i].data_mut()[j] = orig - opts.step;
            let (tm, _, om) = evaluate(&mut f, &probe, false)?;
            let (fm, sm) = (tm.value(om).data()[0], tm.kink_signature());
            drop(tm);
            probe[i].data_mut()[j] = orig;

            if sp != base_signature || sm != base_signature {
                report.nondifferentiable.push((i, j));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[i][j];
            let diff = (a - numeric).abs();
            let rel = if diff <= opts.abs_floor {
                0.0
            } else {
                diff / a.abs().max(numeric.abs())
            };
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.worst = Some(CoordinateError {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    report.pass = report.max_rel_error <= opts.tol;
    Ok(report)
}
