//! Matrix products and the normalizations built on last-axis rows.

use super::real::Real;
use super::tensor::Tensor;
use super::var::Var;
use crate::error::{Error, Result};

impl<T: Real> Var<T> {
    /// `[..., k] x [k, n] -> [..., n]`; leading axes of `self` are flattened.
    pub fn matmul(&self, w: &Var<T>) -> Result<Var<T>> {
        let (xs, ws) = (self.shape().to_vec(), w.shape().to_vec());
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("matmul", format!("{xs:?} x {ws:?}")));
        }
        let k = ws[0];
        let n = ws[1];
        let m = self.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(), false, w.data(), false, T::zero(), &mut out);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        Var::from_op(
            "matmul",
            Tensor::new(out_shape, out)?,
            vec![self.clone(), w.clone()],
            Box::new(move |g, _, parents| {
                let (x, w) = (&parents[0], &parents[1]);
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), false, w.data(), true, T::zero(), &mut gx);
                    Tensor::new(x.shape().to_vec(), gx).unwrap()
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), x.data(), true, g.data(), false, T::zero(), &mut gw);
                    Tensor::new(vec![k, n], gw).unwrap()
                });
                vec![gx, gw]
            }),
        )
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    /// Batched product of rank-3 arrays with optional transposes of either
    /// operand's trailing two axes.
    pub fn bmm(&self, other: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let (a_s, b_s) = (self.shape().to_vec(), other.shape().to_vec());
        if a_s.len() != 3 || b_s.len() != 3 || a_s[0] != b_s[0] {
            return Err(Error::shape("bmm", format!("{a_s:?} x {b_s:?}")));
        }
        let batch = a_s[0];
        let (m, k) = if trans_a { (a_s[2], a_s[1]) } else { (a_s[1], a_s[2]) };
        let (k2, n) = if trans_b { (b_s[2], b_s[1]) } else { (b_s[1], b_s[2]) };
        if k != k2 {
            return Err(Error::shape(
                "bmm",
                format!("{a_s:?}{} x {b_s:?}{}", if trans_a { "^T" } else { "" }, if trans_b { "^T" } else { "" }),
            ));
        }
        let (sa, sb, sc) = (m * k, k * n, m * n);
        let mut out = vec![T::zero(); batch * sc];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.data()[i * sa..(i + 1) * sa],
                trans_a,
                &other.data()[i * sb..(i + 1) * sb],
                trans_b,
                T::zero(),
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        Var::from_op(
            "bmm",
            Tensor::new(vec![batch, m, n], out)?,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                let g = g.data();
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); batch * sa];
                    for i in 0..batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let bi = &b.data()[i * sb..(i + 1) * sb];
                        let dst = &mut ga[i * sa..(i + 1) * sa];
                        if trans_a {
                            // dA^T = op(B) dC^T -> A stored [k, m]: dA = op(B) g^T
                            T::gemm(k, n, m, T::one(), bi, trans_b, gi, true, T::zero(), dst);
                        } else {
                            T::gemm(m, n, k, T::one(), gi, false, bi, !trans_b, T::zero(), dst);
                        }
                    }
                    Tensor::new(a.shape().to_vec(), ga).unwrap()
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); batch * sb];
                    for i in 0..batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let ai = &a.data()[i * sa..(i + 1) * sa];
                        let dst = &mut gb[i * sb..(i + 1) * sb];
                        if trans_b {
                            // B stored [n, k]: dB = g^T op(A)
                            T::gemm(n, m, k, T::one(), gi, true, ai, trans_a, T::zero(), dst);
                        } else {
                            T::gemm(k, m, n, T::one(), ai, !trans_a, gi, false, T::zero(), dst);
                        }
                    }
                    Tensor::new(b.shape().to_vec(), gb).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<T>> {
        let n = last_dim(self, "softmax_last")?;
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        Var::from_op(
            "softmax_last",
            Tensor::new(self.shape().to_vec(), out)?,
            vec![self.clone()],
            Box::new(move |g, y, parents| {
                let mut gx = vec![T::zero(); y.numel()];
                for ((gr, yr), dst) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(parents[0].shape().to_vec(), gx).unwrap())]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Result<Var<T>> {
        let n = last_dim(self, "log_softmax_last")?;
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Var::from_op(
            "log_softmax_last",
            Tensor::new(self.shape().to_vec(), out)?,
            vec![self.clone()],
            Box::new(move |g, y, parents| {
                let mut gx = vec![T::zero(); y.numel()];
                for ((gr, yr), dst) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: T = gr.iter().copied().sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * s;
                    }
                }
                vec![Some(Tensor::new(parents[0].shape().to_vec(), gx).unwrap())]
            }),
        )
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm_last(&self, eps: f64) -> Result<Var<T>> {
        let n = last_dim(self, "layer_norm_last")?;
        let eps = T::from_f64(eps);
        let nt = T::from_f64(n as f64);
        let rows = self.numel() / n;
        let mut out = self.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        Var::from_op(
            "layer_norm_last",
            Tensor::new(self.shape().to_vec(), out)?,
            vec![self.clone()],
            Box::new(move |g, y, parents| {
                let mut gx = vec![T::zero(); y.numel()];
                for (i, ((gr, yr), dst)) in
                    g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                {
                    let mg = gr.iter().copied().sum::<T>() / nt;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nt;
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[i] * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(Tensor::new(parents[0].shape().to_vec(), gx).unwrap())]
            }),
        )
    }
}

fn last_dim<T: Real>(x: &Var<T>, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::shape(op, format!("needs a nonempty last axis, got {:?}", x.shape()))),
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(shape: &[usize], f: impl Fn(usize) -> f64) -> Var<f64> {
        let n = shape.iter().product();
        Var::leaf(Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap(), true).unwrap()
    }

    #[test]
    fn bmm_transposes_agree_with_explicit_transpose() {
        let a = leaf(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = leaf(&[2, 5, 4], |i| (i as f64 * 0.21).cos());
        let y1 = a.bmm(&b, false, true).unwrap();
        let y2 = a.bmm(&b.transpose(1, 2).unwrap(), false, false).unwrap();
        for (p, q) in y1.data().iter().zip(y2.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let at = a.transpose(1, 2).unwrap().detach();
        let y3 = at.bmm(&b, true, true).unwrap();
        for (p, q) in y1.data().iter().zip(y3.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = leaf(&[3, 4], |i| i as f64 - 5.0);
        let y = x.softmax_last().unwrap();
        for r in y.data().chunks(4) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let l = x.log_softmax_last().unwrap();
        for (a, b) in l.data().iter().zip(y.data()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let x = leaf(&[2, 6], |i| (i * i) as f64);
        let y = x.layer_norm_last(0.0).unwrap();
        for r in y.data().chunks(6) {
            let m: f64 = r.iter().sum::<f64>() / 6.0;
            let v: f64 = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }
}
