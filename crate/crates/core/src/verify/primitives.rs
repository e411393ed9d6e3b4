//! Finite-difference suites for every differentiable primitive, on shapes
//! drawn fresh for each seed.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::nn::causal_mask;
use crate::numerics::{attention, concat, gradient_check, CheckOptions, Conv1dSpec, Tensor, Var};

type Loss = Box<dyn Fn(&[Var<f64>]) -> Result<Var<f64>>>;

/// One randomized instance: named inputs and a scalar function of them.
pub struct Case {
    pub inputs: Vec<(&'static str, Tensor<f64>)>,
    pub loss: Loss,
}

pub type CaseBuilder = fn(&mut ChaCha8Rng) -> Result<Case>;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    crate::codec::bottleneck::standard_normal(shape, rng)
}

/// Entries with magnitude in `[lo, hi]` and random sign, for functions
/// with a kink at zero.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Contracts `y` with a fixed random tensor of the same shape so every
/// output entry contributes a distinct weight.
fn contract(y: &Var<f64>, w: &Tensor<f64>) -> Result<Var<f64>> {
    y.mul(&Var::constant(w.clone()))?.sum()
}

/// Wraps an output-producing closure into a loss whose output weights are
/// drawn once, on the first call, from `seed`.
fn weighted(seed: u64, f: impl Fn(&[Var<f64>]) -> Result<Var<f64>> + 'static) -> Loss {
    let cache: std::cell::RefCell<Option<Tensor<f64>>> = Default::default();
    Box::new(move |v| {
        let y = f(v)?;
        let mut c = cache.borrow_mut();
        let w = c.get_or_insert_with(|| normal(y.shape(), &mut ChaCha8Rng::seed_from_u64(seed)));
        contract(&y, w)
    })
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor<f64>, f: fn(&Var<f64>) -> Result<Var<f64>>) -> Case {
    Case { inputs: vec![("x", x)], loss: weighted(rng.random(), move |v| f(&v[0])) }
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = dim(rng, 1, 3);
    (0..rank).map(|_| dim(rng, 1, 4)).collect()
}

fn conv1d(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, c_in, c_out, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
    let spec = Conv1dSpec {
        stride: dim(rng, 1, 3),
        dilation: dim(rng, 1, 2),
        left_pad: dim(rng, 0, 3),
        right_pad: dim(rng, 0, 2),
    };
    // short inputs included: the output may be a single step
    let span = spec.dilation * (k - 1) + 1;
    let t = span.saturating_sub(spec.left_pad + spec.right_pad).max(1) + dim(rng, 0, 6);
    let with_bias = rng.random_bool(0.5);
    let mut inputs = vec![("x", normal(&[b, c_in, t], rng)), ("w", normal(&[c_out, c_in, k], rng))];
    if with_bias {
        inputs.push(("b", normal(&[c_out], rng)));
    }
    Ok(Case {
        inputs,
        loss: weighted(rng.random(), move |v| v[0].conv1d(&v[1], v.get(2), spec)),
    })
}

fn conv_transpose1d(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, c_in, c_out, t) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 5));
    let stride = dim(rng, 1, 4);
    let k = stride * dim(rng, 1, 2);
    let full = (t - 1) * stride + k;
    let trim = dim(rng, 0, (k - 1).min(full - 1));
    let x = normal(&[b, c_in, t], rng);
    let w = normal(&[c_in, c_out, k], rng);
    let bias = normal(&[c_out], rng);
    Ok(Case {
        inputs: vec![("x", x), ("w", w), ("b", bias)],
        loss: weighted(rng.random(), move |v| v[0].conv_transpose1d(&v[1], Some(&v[2]), stride, trim)),
    })
}

fn lstm(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, t, d, h) = (dim(rng, 1, 2), dim(rng, 1, 5), dim(rng, 1, 3), dim(rng, 1, 3));
    let s = 1.0 / (h as f64).sqrt();
    Ok(Case {
        inputs: vec![
            ("x", normal(&[b, t, d], rng)),
            ("w_ih", normal(&[d, 4 * h], rng).map(|v| v * s)),
            ("w_hh", normal(&[h, 4 * h], rng).map(|v| v * s)),
            ("bias", normal(&[4 * h], rng).map(|v| 0.5 * v)),
        ],
        loss: weighted(rng.random(), |v| v[0].lstm_layer(&v[1], &v[2], &v[3])),
    })
}

fn snake_beta(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, c, t) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 6));
    Ok(Case {
        inputs: vec![
            ("x", normal(&[b, c, t], rng)),
            ("log_alpha", uniform(&[c], -0.5, 0.5, rng)),
            ("log_beta", uniform(&[c], -0.5, 0.5, rng)),
        ],
        loss: weighted(rng.random(), |v| v[0].snake_beta(&v[1], &v[2])),
    })
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    Ok(Case {
        inputs: vec![("a", normal(&[m, k], rng)), ("b", normal(&[k, n], rng))],
        loss: weighted(rng.random(), |v| v[0].matmul(&v[1])),
    })
}

fn linear(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, t, i, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    Ok(Case {
        inputs: vec![("x", normal(&[b, t, i], rng)), ("w", normal(&[i, o], rng)), ("b", normal(&[o], rng))],
        loss: weighted(rng.random(), |v| v[0].linear(&v[1], Some(&v[2]))),
    })
}

fn bmm(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (bt, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let a = if ta { [bt, k, m] } else { [bt, m, k] };
    let b = if tb { [bt, n, k] } else { [bt, k, n] };
    Ok(Case {
        inputs: vec![("a", normal(&a, rng)), ("b", normal(&b, rng))],
        loss: weighted(rng.random(), move |v| v[0].bmm(&v[1], ta, tb)),
    })
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = normal(&random_shape(rng), rng);
    Ok(unary(rng, x, |x| x.softmax_last()))
}

fn log_softmax(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = normal(&random_shape(rng), rng);
    Ok(unary(rng, x, |x| x.log_softmax_last()))
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut shape = random_shape(rng);
    *shape.last_mut().unwrap() = dim(rng, 2, 6);
    let x = normal(&shape, rng);
    Ok(unary(rng, x, |x| x.layer_norm_last(1e-5)))
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = normal(&random_shape(rng), rng).map(|v| 2.0 * v);
    Ok(unary(rng, x, |x| x.sigmoid()))
}

fn tanh(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = normal(&random_shape(rng), rng).map(|v| 1.5 * v);
    Ok(unary(rng, x, |x| x.tanh()))
}

fn leaky_relu(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = away_from_zero(&random_shape(rng), 0.05, 2.0, rng);
    Ok(unary(rng, x, |x| x.leaky_relu(0.1)))
}

fn gelu(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = normal(&random_shape(rng), rng).map(|v| 2.0 * v);
    Ok(unary(rng, x, |x| x.gelu()))
}

fn softplus(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = normal(&random_shape(rng), rng).map(|v| 3.0 * v);
    Ok(unary(rng, x, |x| x.softplus()))
}

fn exp_log(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = random_shape(rng);
    Ok(Case {
        inputs: vec![("a", normal(&shape, rng)), ("b", uniform(&shape, 0.2, 3.0, rng))],
        loss: weighted(rng.random(), |v| v[0].exp()?.add(&v[1].log()?)?.add(&v[1].sqrt()?)),
    })
}

fn sin_square_abs(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = random_shape(rng);
    Ok(Case {
        inputs: vec![("a", normal(&shape, rng)), ("b", away_from_zero(&shape, 0.05, 2.0, rng))],
        loss: weighted(rng.random(), |v| v[0].sin()?.add(&v[0].square()?)?.sub(&v[1].abs()?.neg()?.scale(0.5)?)),
    })
}

fn clamp(rng: &mut ChaCha8Rng) -> Result<Case> {
    // keep entries clear of both bounds
    let shape = random_shape(rng);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => rng.random_range(-3.0..-1.1),
            1 => rng.random_range(-0.9..0.9),
            _ => rng.random_range(1.1..3.0),
        })
        .collect();
    let x = Tensor::new(shape, data)?;
    Ok(unary(rng, x, |x| x.clamp(-1.0, 1.0)?.add(&x.clamp_min(0.95)?)))
}

fn arithmetic(rng: &mut ChaCha8Rng) -> Result<Case> {
    // the second operand broadcasts along a random subset of axes
    let shape = random_shape(rng);
    let other: Vec<usize> = shape.iter().map(|&d| if rng.random_bool(0.5) { 1 } else { d }).collect();
    let c = rng.random_range(-2.0..2.0);
    Ok(Case {
        inputs: vec![
            ("a", normal(&shape, rng)),
            ("b", normal(&other, rng)),
            ("c", away_from_zero(&other, 0.5, 2.0, rng)),
        ],
        loss: weighted(rng.random(), move |v| {
            v[0].add(&v[1])?
                .mul(&v[1])?
                .sub(&v[0].div(&v[2])?)?
                .add_scalar(c)?
                .scale(c)
        }),
    })
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut shape = random_shape(rng);
    if shape.len() == 1 {
        shape.push(dim(rng, 1, 3));
    }
    let axis = rng.random_range(0..shape.len());
    let x = normal(&shape, rng);
    let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Ok(Case {
        inputs: vec![("x", x)],
        loss: weighted(rng.random(), move |v| {
            let s = v[0].sum_axis(axis)?;
            let m = v[0].mean_axis(axis)?;
            s.scale(a)?.add(&m)?.add(&v[0].sum()?.scale(b)?)?.add(&v[0].mean()?)
        }),
    })
}

fn indexing(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 4));
    let rows: Vec<usize> = (0..dim(rng, 1, 5)).map(|_| rng.random_range(0..r)).collect();
    let picks: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let gather: Rc<Vec<usize>> = Rc::new((0..6).map(|_| rng.random_range(0..r * c)).collect());
    let start = rng.random_range(0..c);
    let len = rng.random_range(1..=c - start);
    Ok(Case {
        inputs: vec![("x", normal(&[r, c], rng)), ("y", normal(&[r, c], rng))],
        loss: weighted(rng.random(), move |v| {
            let x = &v[0];
            let parts = [
                x.index_rows(&rows)?.reshape(&[rows.len() * c])?,
                x.pick(&picks)?.reshape(&[r])?,
                x.gather(gather.clone(), &[6])?,
                x.narrow(1, start, len)?.reshape(&[r * len])?,
                x.t()?.reshape(&[r * c])?,
                concat(&[x.clone(), v[1].clone()], 0)?.reshape(&[2 * r * c])?,
            ];
            concat(&parts, 0)
        }),
    })
}

fn magnitude(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = random_shape(rng);
    Ok(Case {
        inputs: vec![("re", away_from_zero(&shape, 0.2, 2.0, rng)), ("im", normal(&shape, rng))],
        loss: weighted(rng.random(), |v| v[0].magnitude(&v[1])),
    })
}

fn self_attention(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, t, heads) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 2));
    let d = heads * dim(rng, 1, 3);
    let causal = rng.random_bool(0.5);
    Ok(Case {
        inputs: vec![("q", normal(&[b, t, d], rng)), ("k", normal(&[b, t, d], rng)), ("v", normal(&[b, t, d], rng))],
        loss: weighted(rng.random(), move |v| {
            attention(&v[0], &v[1], &v[2], heads, causal.then(|| causal_mask(t)))
        }),
    })
}

/// Every primitive suite, by name.
pub fn cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("conv1d", conv1d),
        ("conv_transpose1d", conv_transpose1d),
        ("lstm", lstm),
        ("snake_beta", snake_beta),
        ("matmul", matmul),
        ("linear", linear),
        ("bmm", bmm),
        ("softmax", softmax),
        ("log_softmax", log_softmax),
        ("layer_norm", layer_norm),
        ("sigmoid", sigmoid),
        ("tanh", tanh),
        ("leaky_relu", leaky_relu),
        ("gelu", gelu),
        ("softplus", softplus),
        ("exp_log_sqrt", exp_log),
        ("sin_square_abs", sin_square_abs),
        ("clamp", clamp),
        ("elementwise_arithmetic", arithmetic),
        ("reductions", reductions),
        ("indexing", indexing),
        ("magnitude", magnitude),
        ("attention", self_attention),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct PrimitiveSummary {
    pub name: String,
    pub seeds: u64,
    pub worst_rel_err: f64,
    pub worst_seed: u64,
    pub tol: f64,
    pub pass: bool,
}

/// Runs one primitive over seeds `0..seeds`.
pub fn check_primitive(name: &str, build: CaseBuilder, seeds: u64, tol: f64) -> Result<PrimitiveSummary> {
    let (mut worst, mut worst_seed) = (0.0f64, 0);
    let mut pass = true;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
        let case = build(&mut rng)?;
        let opts = CheckOptions { tol, seed, max_entries: 32, ..Default::default() };
        let r = gradient_check(&case.inputs, &case.loss, opts)?;
        if r.max_rel_err() >= worst {
            worst = r.max_rel_err();
            worst_seed = seed;
        }
        pass &= r.pass;
    }
    Ok(PrimitiveSummary { name: name.to_string(), seeds, worst_rel_err: worst, worst_seed, tol, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_on_a_few_seeds() {
        for (name, build) in cases() {
            let r = check_primitive(name, build, 4, 1e-4).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn weighted_loss_is_stable_across_calls() {
        let f = weighted(3, |v| v[0].scale(2.0));
        let x = Var::constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let a = f(std::slice::from_ref(&x)).unwrap().item();
        let b = f(std::slice::from_ref(&x)).unwrap().item();
        assert_eq!(a, b);
    }
}
