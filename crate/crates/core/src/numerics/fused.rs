//! Composite operations with hand-written backward passes: LSTM, SnakeBeta,
//! complex magnitude and multi-head attention.

use std::rc::Rc;

use super::ops::sigmoid;
use super::real::Real;
use super::tensor::Tensor;
use super::var::Var;
use crate::error::{Error, Result};

impl<T: Real> Var<T> {
    /// One unidirectional LSTM layer over `[B, T, D]` (or `[T, D]`), zero
    /// initial state. Weights are `w_ih: [D, 4H]`, `w_hh: [H, 4H]`,
    /// `bias: [4H]` with gate order input, forget, cell, output.
    pub fn lstm_layer(&self, w_ih: &Var<T>, w_hh: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let (batch, steps, d, batched) = match *self.shape() {
            [t, d] => (1, t, d, false),
            [b, t, d] => (b, t, d, true),
            _ => return Err(Error::shape("lstm", format!("input {:?}", self.shape()))),
        };
        let h = w_hh.shape()[0];
        let g4 = 4 * h;
        if w_ih.shape() != [d, g4] || w_hh.shape() != [h, g4] || bias.shape() != [g4] {
            return Err(Error::shape(
                "lstm",
                format!(
                    "input dim {d}, w_ih {:?}, w_hh {:?}, bias {:?}",
                    w_ih.shape(),
                    w_hh.shape(),
                    bias.shape()
                ),
            ));
        }
        let rows = batch * steps;
        // gates hold pre-activations first, activations after the step runs
        let mut gates = vec![T::zero(); rows * g4];
        for r in 0..rows {
            gates[r * g4..(r + 1) * g4].copy_from_slice(bias.data());
        }
        T::gemm(rows, d, g4, T::one(), self.data(), false, w_ih.data(), false, T::one(), &mut gates);
        let mut hs = vec![T::zero(); rows * h];
        let mut cs = vec![T::zero(); rows * h];
        for t in 0..steps {
            if t > 0 {
                T::gemm_strided(
                    batch,
                    h,
                    g4,
                    T::one(),
                    &hs[(t - 1) * h..],
                    (steps * h) as isize,
                    1,
                    w_hh.data(),
                    g4 as isize,
                    1,
                    T::one(),
                    &mut gates[t * g4..],
                    (steps * g4) as isize,
                    1,
                );
            }
            for b in 0..batch {
                let r = b * steps + t;
                let gr = &mut gates[r * g4..(r + 1) * g4];
                for j in 0..h {
                    let i = sigmoid(gr[j]);
                    let f = sigmoid(gr[h + j]);
                    let g = gr[2 * h + j].tanh();
                    let o = sigmoid(gr[3 * h + j]);
                    gr[j] = i;
                    gr[h + j] = f;
                    gr[2 * h + j] = g;
                    gr[3 * h + j] = o;
                    let c_prev = if t > 0 { cs[(r - 1) * h + j] } else { T::zero() };
                    let c = f * c_prev + i * g;
                    cs[r * h + j] = c;
                    hs[r * h + j] = o * c.tanh();
                }
            }
        }
        let out_shape = if batched { vec![batch, steps, h] } else { vec![steps, h] };
        let value = Tensor::new(out_shape, hs)?;
        if !cs.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite { op: "lstm cell state".into() });
        }
        Var::from_op(
            "lstm",
            value,
            vec![self.clone(), w_ih.clone(), w_hh.clone(), bias.clone()],
            Box::new(move |gout, hs, parents| {
                let (x, w_ih, w_hh) = (&parents[0], &parents[1], &parents[2]);
                let (gout, hs) = (gout.data(), hs.data());
                let mut dpre = vec![T::zero(); rows * g4];
                let mut dh_next = vec![T::zero(); batch * h];
                let mut dc_next = vec![T::zero(); batch * h];
                for t in (0..steps).rev() {
                    for b in 0..batch {
                        let r = b * steps + t;
                        let gr = &gates[r * g4..(r + 1) * g4];
                        let dp = &mut dpre[r * g4..(r + 1) * g4];
                        for j in 0..h {
                            let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                            let c = cs[r * h + j];
                            let c_prev = if t > 0 { cs[(r - 1) * h + j] } else { T::zero() };
                            let tc = c.tanh();
                            let dh = gout[r * h + j] + dh_next[b * h + j];
                            let dc = dh * o * (T::one() - tc * tc) + dc_next[b * h + j];
                            dp[j] = dc * g * i * (T::one() - i);
                            dp[h + j] = dc * c_prev * f * (T::one() - f);
                            dp[2 * h + j] = dc * i * (T::one() - g * g);
                            dp[3 * h + j] = dh * tc * o * (T::one() - o);
                            dc_next[b * h + j] = dc * f;
                        }
                    }
                    // dh_{t-1} = dpre_t W_hh^T
                    T::gemm_strided(
                        batch,
                        g4,
                        h,
                        T::one(),
                        &dpre[t * g4..],
                        (steps * g4) as isize,
                        1,
                        w_hh.data(),
                        1,
                        g4 as isize,
                        T::zero(),
                        &mut dh_next,
                        h as isize,
                        1,
                    );
                }
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); rows * d];
                    T::gemm(rows, g4, d, T::one(), &dpre, false, w_ih.data(), true, T::zero(), &mut gx);
                    Tensor::new(x.shape().to_vec(), gx).unwrap()
                });
                let gw_ih = w_ih.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); d * g4];
                    T::gemm(d, rows, g4, T::one(), x.data(), true, &dpre, false, T::zero(), &mut gw);
                    Tensor::new(vec![d, g4], gw).unwrap()
                });
                let gw_hh = w_hh.requires_grad().then(|| {
                    // previous hidden states, zero at t = 0
                    let mut prev = vec![T::zero(); rows * h];
                    for b in 0..batch {
                        for t in 1..steps {
                            let r = b * steps + t;
                            prev[r * h..(r + 1) * h].copy_from_slice(&hs[(r - 1) * h..r * h]);
                        }
                    }
                    let mut gw = vec![T::zero(); h * g4];
                    T::gemm(h, rows, g4, T::one(), &prev, true, &dpre, false, T::zero(), &mut gw);
                    Tensor::new(vec![h, g4], gw).unwrap()
                });
                let gb = parents[3].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); g4];
                    for row in dpre.chunks(g4) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(vec![g4], gb).unwrap()
                });
                vec![gx, gw_ih, gw_hh, gb]
            }),
        )
    }

    /// SnakeBeta activation `x + sin^2(a x) / b` with per-channel
    /// `a = exp(log_alpha)`, `b = exp(log_beta)`. Input is `[C, T]` or
    /// `[B, C, T]`.
    pub fn snake_beta(&self, log_alpha: &Var<T>, log_beta: &Var<T>) -> Result<Var<T>> {
        let s = self.shape();
        let (ch, t) = match *s {
            [c, t] | [_, c, t] => (c, t),
            _ => return Err(Error::shape("snake_beta", format!("input {s:?}"))),
        };
        if log_alpha.shape() != [ch] || log_beta.shape() != [ch] {
            return Err(Error::shape(
                "snake_beta",
                format!("{ch} channels, alpha {:?}, beta {:?}", log_alpha.shape(), log_beta.shape()),
            ));
        }
        let a: Vec<T> = log_alpha.data().iter().map(|v| v.exp()).collect();
        let inv_b: Vec<T> = log_beta.data().iter().map(|v| (-*v).exp()).collect();
        let chan = move |i: usize| (i / t) % ch;
        let out: Vec<T> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = chan(i);
                let sn = (a[c] * x).sin();
                x + sn * sn * inv_b[c]
            })
            .collect();
        Var::from_op(
            "snake_beta",
            Tensor::new(s.to_vec(), out)?,
            vec![self.clone(), log_alpha.clone(), log_beta.clone()],
            Box::new(move |g, _, parents| {
                let x = parents[0].data();
                let mut gx = vec![T::zero(); x.len()];
                let mut ga = vec![T::zero(); ch];
                let mut gb = vec![T::zero(); ch];
                for (i, (&xv, &gv)) in x.iter().zip(g.data()).enumerate() {
                    let c = chan(i);
                    let ax = a[c] * xv;
                    let sn = ax.sin();
                    let s2 = (ax + ax).sin();
                    gx[i] = gv * (T::one() + a[c] * s2 * inv_b[c]);
                    ga[c] += gv * s2 * ax * inv_b[c];
                    gb[c] -= gv * sn * sn * inv_b[c];
                }
                vec![
                    parents[0].requires_grad().then(|| Tensor::new(parents[0].shape().to_vec(), gx).unwrap()),
                    parents[1].requires_grad().then(|| Tensor::new(vec![ch], ga).unwrap()),
                    parents[2].requires_grad().then(|| Tensor::new(vec![ch], gb).unwrap()),
                ]
            }),
        )
    }

    /// `sqrt(re^2 + im^2)` elementwise; the gradient at the origin is taken
    /// as zero.
    pub fn magnitude(&self, im: &Var<T>) -> Result<Var<T>> {
        if self.shape() != im.shape() {
            return Err(Error::shape("magnitude", format!("{:?} vs {:?}", self.shape(), im.shape())));
        }
        let out = self
            .data()
            .iter()
            .zip(im.data())
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect();
        Var::from_op(
            "magnitude",
            Tensor::new(self.shape().to_vec(), out)?,
            vec![self.clone(), im.clone()],
            Box::new(|g, y, parents| {
                let grad = |p: &Var<T>| {
                    p.requires_grad().then(|| {
                        let d = p
                            .data()
                            .iter()
                            .zip(y.data())
                            .zip(g.data())
                            .map(|((&v, &m), &gv)| if m > T::zero() { gv * v / m } else { T::zero() })
                            .collect();
                        Tensor::new(p.shape().to_vec(), d).unwrap()
                    })
                };
                vec![grad(&parents[0]), grad(&parents[1])]
            }),
        )
    }
}

/// Scaled dot-product self-attention over `[B, T, D]` projections split
/// into `heads` heads. `mask[i * T + j]` allows query `i` to see key `j`;
/// every query must see at least one key.
pub fn attention<T: Real>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Var<T>> {
    let &[batch, steps, d] = q.shape() else {
        return Err(Error::shape("attention", format!("q {:?}", q.shape())));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() || heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("q {:?} k {:?} v {:?} heads {heads}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if let Some(m) = &mask {
        if m.len() != steps * steps {
            return Err(Error::shape("attention", format!("mask of {} for {steps} steps", m.len())));
        }
        for i in 0..steps {
            if !m[i * steps..(i + 1) * steps].iter().any(|&a| a) {
                return Err(Error::invalid(format!("attention mask row {i} sees no key")));
            }
        }
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let tt = steps * steps;
    let ld = d as isize;
    let mut probs = vec![T::zero(); batch * heads * tt];
    let mut out = vec![T::zero(); batch * steps * d];
    for b in 0..batch {
        for hd in 0..heads {
            let off = b * steps * d + hd * dh;
            let p = &mut probs[(b * heads + hd) * tt..(b * heads + hd + 1) * tt];
            T::gemm_strided(
                steps, dh, steps, scale, &q.data()[off..], ld, 1, &k.data()[off..], 1, ld, T::zero(), p,
                steps as isize, 1,
            );
            for (i, row) in p.chunks_mut(steps).enumerate() {
                if let Some(m) = &mask {
                    for (j, s) in row.iter_mut().enumerate() {
                        if !m[i * steps + j] {
                            *s = T::neg_infinity();
                        }
                    }
                }
                super::linalg::softmax_row(row);
            }
            T::gemm_strided(
                steps, steps, dh, T::one(), p, steps as isize, 1, &v.data()[off..], ld, 1, T::zero(),
                &mut out[off..], ld, 1,
            );
        }
    }
    Var::from_op(
        "attention",
        Tensor::new(vec![batch, steps, d], out)?,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, _, parents| {
            let (q, k, v) = (parents[0].data(), parents[1].data(), parents[2].data());
            let g = g.data();
            let n = batch * steps * d;
            let (mut gq, mut gk, mut gv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
            let mut dp = vec![T::zero(); tt];
            for b in 0..batch {
                for hd in 0..heads {
                    let off = b * steps * d + hd * dh;
                    let p = &probs[(b * heads + hd) * tt..(b * heads + hd + 1) * tt];
                    // dV = P^T dO
                    T::gemm_strided(
                        steps, steps, dh, T::one(), p, 1, steps as isize, &g[off..], ld, 1, T::zero(),
                        &mut gv[off..], ld, 1,
                    );
                    // dP = dO V^T
                    T::gemm_strided(
                        steps, dh, steps, T::one(), &g[off..], ld, 1, &v[off..], 1, ld, T::zero(), &mut dp,
                        steps as isize, 1,
                    );
                    for (dr, pr) in dp.chunks_mut(steps).zip(p.chunks(steps)) {
                        let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (x, &pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    // dQ = dS K, dK = dS^T Q
                    T::gemm_strided(
                        steps, steps, dh, T::one(), &dp, steps as isize, 1, &k[off..], ld, 1, T::zero(),
                        &mut gq[off..], ld, 1,
                    );
                    T::gemm_strided(
                        steps, steps, dh, T::one(), &dp, 1, steps as isize, &q[off..], ld, 1, T::zero(),
                        &mut gk[off..], ld, 1,
                    );
                }
            }
            let shape = vec![batch, steps, d];
            vec![
                parents[0].requires_grad().then(|| Tensor::new(shape.clone(), gq).unwrap()),
                parents[1].requires_grad().then(|| Tensor::new(shape.clone(), gk).unwrap()),
                parents[2].requires_grad().then(|| Tensor::new(shape.clone(), gv).unwrap()),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(shape: &[usize], f: impl Fn(usize) -> f64) -> Var<f64> {
        let n = shape.iter().product();
        Var::leaf(Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap(), true).unwrap()
    }

    #[test]
    fn snake_values() {
        let x = leaf(&[1, 2], |i| [0.0, std::f64::consts::FRAC_PI_2][i]);
        let z = leaf(&[1], |_| 0.0);
        let y = x.snake_beta(&z, &z).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 2.570_796_326_794_896_6).abs() < 1e-12);
    }

    #[test]
    fn lstm_zero_input_zero_bias_is_zero() {
        let x = leaf(&[2, 5, 3], |_| 0.0);
        let w_ih = leaf(&[3, 16], |i| (i as f64).sin());
        let w_hh = leaf(&[4, 16], |i| (i as f64).cos());
        let b = leaf(&[16], |_| 0.0);
        let y = x.lstm_layer(&w_ih, &w_hh, &b).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_is_causal() {
        let w_ih = leaf(&[3, 16], |i| (i as f64 * 0.7).sin());
        let w_hh = leaf(&[4, 16], |i| (i as f64 * 0.3).cos());
        let b = leaf(&[16], |i| i as f64 * 0.01);
        let base: Vec<f64> = (0..18).map(|i| (i as f64 * 0.4).sin()).collect();
        let y0 = Var::constant(Tensor::new(vec![6, 3], base.clone()).unwrap())
            .lstm_layer(&w_ih, &w_hh, &b)
            .unwrap();
        for t in 0..6 {
            let mut p = base.clone();
            p[t * 3 + 1] += 0.5;
            let y = Var::constant(Tensor::new(vec![6, 3], p).unwrap())
                .lstm_layer(&w_ih, &w_hh, &b)
                .unwrap();
            assert_eq!(&y.data()[..t * 4], &y0.data()[..t * 4]);
            assert_ne!(&y.data()[t * 4..(t + 1) * 4], &y0.data()[t * 4..(t + 1) * 4]);
        }
    }

    #[test]
    fn causal_mask_blocks_future() {
        let steps = 4;
        let mask: Vec<bool> = (0..steps * steps).map(|i| i % steps <= i / steps).collect();
        let mask = Rc::new(mask);
        let base: Vec<f64> = (0..steps * 4).map(|i| (i as f64).sin()).collect();
        let run = |data: Vec<f64>| {
            let x = Var::constant(Tensor::new(vec![1, steps, 4], data).unwrap());
            attention(&x, &x, &x, 2, Some(mask.clone())).unwrap()
        };
        let y0 = run(base.clone());
        let mut p = base;
        p[3 * 4] += 1.0;
        let y1 = run(p);
        assert_eq!(&y0.data()[..12], &y1.data()[..12]);
    }
}
