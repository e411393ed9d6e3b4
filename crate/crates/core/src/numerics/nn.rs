//! Parameterized layers addressed by dotted name prefixes.
//!
//! Each layer has an `init_*` function that registers its tensors in a
//! [`ParameterSet`] and a forward function that reads them from a
//! [`Session`].

use std::rc::Rc;

use rand::Rng;

use super::conv::Conv1dSpec;
use super::fused::attention;
use super::params::{ParameterSet, Session};
use super::real::Real;
use super::tensor::Tensor;
use super::var::Var;
use crate::error::Result;

fn key(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// `weight: [in, out]`, `bias: [out]`.
pub fn init_linear(ps: &mut ParameterSet, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<()> {
    ps.init_normal(key(prefix, "weight"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)?;
    ps.init_const(key(prefix, "bias"), &[d_out], 0.0)
}

pub fn init_linear_zero(ps: &mut ParameterSet, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
    ps.init_const(key(prefix, "weight"), &[d_in, d_out], 0.0)?;
    ps.init_const(key(prefix, "bias"), &[d_out], 0.0)
}

pub fn linear<T: Real>(s: &Session<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    x.linear(&s.p(&key(prefix, "weight"))?, Some(&s.p(&key(prefix, "bias"))?))
}

/// `weight: [c_out, c_in, k]`, `bias: [c_out]`.
pub fn init_conv(
    ps: &mut ParameterSet,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    ps.init_normal(key(prefix, "weight"), &[c_out, c_in, k], 1.0 / ((c_in * k) as f64).sqrt(), rng)?;
    ps.init_const(key(prefix, "bias"), &[c_out], 0.0)
}

pub fn conv<T: Real>(s: &Session<T>, prefix: &str, x: &Var<T>, spec: Conv1dSpec) -> Result<Var<T>> {
    x.conv1d(&s.p(&key(prefix, "weight"))?, Some(&s.p(&key(prefix, "bias"))?), spec)
}

pub fn init_layer_norm(ps: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    ps.init_const(key(prefix, "gain"), &[dim], 1.0)?;
    ps.init_const(key(prefix, "shift"), &[dim], 0.0)
}

pub fn layer_norm<T: Real>(s: &Session<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    x.layer_norm_last(1e-5)?
        .mul(&s.p(&key(prefix, "gain"))?)?
        .add(&s.p(&key(prefix, "shift"))?)
}

/// Pre-norm transformer block: self-attention and a GELU perceptron of
/// width `4 * dim`, both residual.
pub fn init_block(ps: &mut ParameterSet, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<()> {
    init_layer_norm(ps, &key(prefix, "norm1"), dim)?;
    for p in ["q", "k", "v", "o"] {
        init_linear(ps, &key(prefix, &format!("attn.{p}")), dim, dim, rng)?;
    }
    init_layer_norm(ps, &key(prefix, "norm2"), dim)?;
    init_linear(ps, &key(prefix, "mlp.fc1"), dim, 4 * dim, rng)?;
    init_linear(ps, &key(prefix, "mlp.fc2"), 4 * dim, dim, rng)
}

/// Multi-head self-attention sublayer on `[B, T, D]`.
pub fn self_attention<T: Real>(
    s: &Session<T>,
    prefix: &str,
    h: &Var<T>,
    heads: usize,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Var<T>> {
    let q = linear(s, &key(prefix, "q"), h)?;
    let k = linear(s, &key(prefix, "k"), h)?;
    let v = linear(s, &key(prefix, "v"), h)?;
    let a = attention(&q, &k, &v, heads, mask)?;
    linear(s, &key(prefix, "o"), &a)
}

pub fn mlp<T: Real>(s: &Session<T>, prefix: &str, h: &Var<T>) -> Result<Var<T>> {
    let u = linear(s, &key(prefix, "fc1"), h)?.gelu()?;
    linear(s, &key(prefix, "fc2"), &u)
}

pub fn block<T: Real>(
    s: &Session<T>,
    prefix: &str,
    x: &Var<T>,
    heads: usize,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Var<T>> {
    let h = layer_norm(s, &key(prefix, "norm1"), x)?;
    let x = x.add(&self_attention(s, &key(prefix, "attn"), &h, heads, mask)?)?;
    let h = layer_norm(s, &key(prefix, "norm2"), &x)?;
    x.add(&mlp(s, &key(prefix, "mlp"), &h)?)
}

/// Lower-triangular mask: position `i` sees positions `<= i`.
pub fn causal_mask(steps: usize) -> Rc<Vec<bool>> {
    Rc::new((0..steps * steps).map(|i| i % steps <= i / steps).collect())
}

/// Sinusoidal embedding of arbitrary real positions, `[n, dim]`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor<f64> {
    let half = dim / 2;
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data[r * dim + i] = (p * freq).sin();
            data[r * dim + half + i] = (p * freq).cos();
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("sinusoidal shape")
}

/// Constant `[n, dim]` positional table for positions `0..n`.
pub fn positions<T: Real>(n: usize, dim: usize) -> Var<T> {
    let p: Vec<f64> = (0..n).map(|i| i as f64).collect();
    Var::constant(Tensor::from_f64(&sinusoidal(&p, dim)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_is_causal_under_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        init_block(&mut ps, "b", 8, &mut rng).unwrap();
        let s: Session<f64> = Session::eval(&ps);
        let base: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let run = |d: Vec<f64>| {
            let x = Var::constant(Tensor::new(vec![1, 5, 8], d).unwrap());
            block(&s, "b", &x, 2, Some(causal_mask(5))).unwrap().data().to_vec()
        };
        let y0 = run(base.clone());
        let mut p = base;
        p[3 * 8 + 2] += 1.0;
        let y1 = run(p);
        assert_eq!(&y0[..24], &y1[..24]);
        assert_ne!(&y0[24..32], &y1[24..32]);
    }
}
