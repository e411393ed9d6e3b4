//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{ParameterSet, Session};
use super::tensor::Tensor;
use super::var::Var;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Second step tried on entries that miss at `step`; the entry keeps
    /// the smaller error. Short steps avoid kinks, long ones round-off.
    pub wide_step: Option<f64>,
    pub tol: f64,
    /// Entries probed per input; larger inputs are subsampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            wide_step: None,
            tol: 1e-4,
            max_entries: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with a floor at `1e-3` of the input's gradient scale so
/// that entries that are tiny compared to the rest do not dominate.
fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Checks `f` against central differences. `f` maps the inputs to a scalar
/// loss together with its analytic gradient for each input.
pub fn check_fn(
    names: &[String],
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
    opts: CheckOptions,
) -> Result<CheckReport> {
    let (_, analytic) = f(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut reports = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let n = inputs[i].numel();
        let picks: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_entries).into_vec()
        };
        let mut diff = |j: usize, h: f64| -> Result<f64> {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (lp, _) = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (lm, _) = f(&work)?;
            work[i].data_mut()[j] = orig;
            Ok((lp - lm) / (2.0 * h))
        };
        let mut pairs = Vec::with_capacity(picks.len());
        for &j in &picks {
            pairs.push((analytic[i].data()[j], diff(j, opts.step)?));
        }
        // floor against the largest analytic entry of the whole input, so a
        // sample of near-zero entries is not judged on round-off alone
        let scale = pairs
            .iter()
            .map(|(a, n)| a.abs().max(n.abs()))
            .chain(analytic[i].data().iter().map(|a| a.abs()))
            .fold(0.0, f64::max);
        let mut max_rel_err: f64 = 0.0;
        for (&j, &(a, n)) in picks.iter().zip(&pairs) {
            let mut e = rel_err(a, n, scale);
            if let (Some(h), true) = (opts.wide_step, e >= opts.tol) {
                e = e.min(rel_err(a, diff(j, h)?, scale));
            }
            max_rel_err = max_rel_err.max(e);
        }
        reports.push(InputCheck {
            name: name.clone(),
            entries: picks.len(),
            max_rel_err,
            max_abs_analytic: pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max),
        });
    }
    let pass = reports.iter().all(|r| r.max_rel_err < opts.tol);
    Ok(CheckReport {
        inputs: reports,
        tol: opts.tol,
        pass,
    })
}

/// Checks a function of differentiable inputs.
pub fn gradient_check(
    inputs: &[(&str, Tensor<f64>)],
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    opts: CheckOptions,
) -> Result<CheckReport> {
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    let tensors: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    check_fn(
        &names,
        &tensors,
        |ts| {
            let vars = ts
                .iter()
                .map(|t| Var::leaf(t.clone(), true))
                .collect::<Result<Vec<_>>>()?;
            let y = f(&vars)?;
            let loss = y.item();
            y.backward()?;
            let grads = vars
                .iter()
                .map(|v| v.grad().map(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
                .collect();
            Ok((loss, grads))
        },
        opts,
    )
}

/// Checks a loss of a parameter set with respect to the named parameters.
pub fn check_parameters(
    params: &ParameterSet,
    names: &[String],
    loss: impl Fn(&Session<f64>) -> Result<Var<f64>>,
    opts: CheckOptions,
) -> Result<CheckReport> {
    let tensors = names
        .iter()
        .map(|n| params.get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    check_fn(
        names,
        &tensors,
        |ts| {
            let mut p = params.clone();
            for (n, t) in names.iter().zip(ts) {
                p.set(n, t.clone())?;
            }
            let s = Session::<f64>::train(&p);
            let y = loss(&s)?;
            let l = y.item();
            y.backward()?;
            let g = s.grads();
            let grads = names
                .iter()
                .zip(ts)
                .map(|(n, t)| g.get(n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            Ok((l, grads))
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        // central differences are exact on quadratics, so a wide step only
        // shrinks round-off
        let opts = CheckOptions { tol: 1e-10, step: 1e-2, ..Default::default() };
        let r = gradient_check(&[("x", x)], |v| v[0].square()?.sum(), opts).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let r = gradient_check(
            &[("x", x)],
            |v| {
                let x = &v[0];
                let y = Var::from_op(
                    "bad_square",
                    x.value().map(|a| a * a),
                    vec![x.clone()],
                    Box::new(|g, _, p| {
                        // derivative off by a factor of 3/2
                        vec![Some(Tensor::new(g.shape().to_vec(), g.data().iter().zip(p[0].data()).map(|(g, x)| 3.0 * g * x).collect()).unwrap())]
                    }),
                )?;
                y.sum()
            },
            CheckOptions::default(),
        )
        .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn errors_propagate() {
        let x = Tensor::new(vec![1], vec![-1.0]).unwrap();
        let r = gradient_check(&[("x", x)], |v| v[0].log()?.sum(), CheckOptions::default());
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
