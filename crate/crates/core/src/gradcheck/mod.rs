//! Reverse-mode gradients checked against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod suite;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Worst coordinate found by [`grad_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose probes cross a relu, max-pool or gather
    /// switch; central differences are meaningless there.
    pub skipped: usize,
}

/// Denominator floor of [`relative_error`]. Central differences at step
/// `1e-3` carry roughly `1e-12` of rounding noise, so gradients below this
/// magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - b| / max(RELATIVE_FLOOR, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(RELATIVE_FLOOR)
}

/// Worst relative error between reverse-mode gradients of `f` and the
/// five-point central difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
/// over every coordinate of every input.
///
/// Tensor-valued outputs are reduced to a scalar with fixed pseudo-random
/// weights, so every output coordinate contributes to the check.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, step).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_check_finite(true);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let probe = probe_weights(g.value(out).numel());
    let weights = g.constant(Tensor::new(g.shape(out).to_vec(), probe.clone())?);
    let weighted = g.mul(out, weights)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    let base = g.branch_signature();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let value = g
            .value(out)
            .data()
            .iter()
            .zip(&probe)
            .map(|(a, b)| a * b)
            .sum();
        Ok((value, g.branch_signature()))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[which].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for idx in 0..inputs[which].numel() {
            let orig = inputs[which].data()[idx];
            let probe_at = |offset: f64| -> Result<(f64, Vec<usize>)> {
                work[which].data_mut()[idx] = orig + offset;
                eval(&work)
            };
            let samples = [2.0 * step, step, -step, -2.0 * step]
                .map(probe_at);
            work[which].data_mut()[idx] = orig;
            report.coordinates += 1;
            let mut values = [0.0; 4];
            let mut smooth = true;
            for (v, s) in values.iter_mut().zip(samples) {
                let (value, sig) = s?;
                *v = value;
                smooth &= sig == base;
            }
            if !smooth {
                report.skipped += 1;
                continue;
            }
            let [p2, p1, m1, m2] = values;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step);
            let err = relative_error(analytic[idx], numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.input = which;
                report.index = idx;
                report.analytic = analytic[idx];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Checks a module whose weights live in `store`: every trainable entry and
/// every tensor in `inputs` is perturbed, buffers stay constant. `f` receives
/// the bound store and the input handles.
pub fn grad_check_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let trainable: Vec<Tensor> = store
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.tensor.clone())
        .collect();
    let n = trainable.len();
    let all: Vec<Tensor> = trainable.into_iter().chain(inputs.iter().cloned()).collect();
    grad_check_report(
        |g, vars| {
            let mut next = vars.iter();
            let bound: Vec<Var> = store
                .entries()
                .iter()
                .map(|e| {
                    if e.trainable {
                        *next.next().expect("one var per trainable entry")
                    } else {
                        g.constant(e.tensor.clone())
                    }
                })
                .collect();
            f(g, &Bound::from_vars(bound), &vars[n..])
        },
        &all,
        step,
    )
}

fn probe_weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_no_error() {
        let x = Tensor::row(&[0.3, -1.2, 2.0]);
        let err = grad_check(|_, v| Ok(v[0]), &[x], 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn matmul_chain_is_accurate() {
        let a = Tensor::from_rows(&[vec![0.2, -0.4, 1.0], vec![0.7, 0.1, -0.3]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.3], vec![0.4, -0.9]]);
        let c = Tensor::from_rows(&[vec![0.6], vec![-1.1]]);
        let err = grad_check(
            |g, v| {
                let ab = g.matmul(v[0], v[1])?;
                g.matmul(ab, v[2])
            },
            &[a, b, c],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }
}
