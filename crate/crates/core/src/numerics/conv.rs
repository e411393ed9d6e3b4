//! One-dimensional convolutions over `[C, T]` or batched `[B, C, T]` arrays.

use super::real::Real;
use super::tensor::Tensor;
use super::var::Var;
use crate::error::{Error, Result};

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub left_pad: usize,
    pub right_pad: usize,
}

impl Conv1dSpec {
    /// Causal padding: `dilation * (kernel - 1)` on the left only.
    pub fn causal(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            dilation,
            left_pad: dilation * (kernel - 1),
            right_pad: 0,
        }
    }

    /// Equal padding on both sides ("same" length at stride 1, odd kernels).
    pub fn symmetric(kernel: usize, stride: usize, dilation: usize) -> Self {
        let p = dilation * (kernel - 1) / 2;
        Self {
            stride,
            dilation,
            left_pad: p,
            right_pad: dilation * (kernel - 1) - p,
        }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + self.left_pad + self.right_pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Splits an input shape into `(batch, channels, time, batched)`.
fn split_batch(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [c, t] => Ok((1, c, t, false)),
        [b, c, t] => Ok((b, c, t, true)),
        _ => Err(Error::shape(op, format!("expected [C,T] or [B,C,T], got {shape:?}"))),
    }
}

struct Im2Col {
    c_in: usize,
    k: usize,
    t_in: usize,
    t_out: usize,
    spec: Conv1dSpec,
}

impl Im2Col {
    /// Output times `[lo, hi)` whose tap `kk` lands inside the input, and
    /// the input index read at `lo`.
    #[inline]
    fn valid(&self, kk: usize) -> (usize, usize, usize) {
        let Conv1dSpec { stride, dilation, left_pad, .. } = self.spec;
        let offset = kk * dilation;
        let lo = left_pad.saturating_sub(offset).div_ceil(stride).min(self.t_out);
        let limit = self.t_in + left_pad;
        let hi = if limit > offset { (limit - offset).div_ceil(stride).min(self.t_out) } else { 0 };
        let hi = hi.max(lo);
        (lo, hi, (lo * stride + offset).saturating_sub(left_pad))
    }

    fn fill<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let stride = self.spec.stride;
        for ci in 0..self.c_in {
            let xc = &x[ci * self.t_in..(ci + 1) * self.t_in];
            for kk in 0..self.k {
                let row = &mut cols[(ci * self.k + kk) * self.t_out..(ci * self.k + kk + 1) * self.t_out];
                let (lo, hi, p0) = self.valid(kk);
                row[..lo].fill(T::zero());
                row[hi..].fill(T::zero());
                if hi == lo {
                    continue;
                }
                if stride == 1 {
                    row[lo..hi].copy_from_slice(&xc[p0..p0 + hi - lo]);
                } else {
                    for (i, v) in row[lo..hi].iter_mut().enumerate() {
                        *v = xc[p0 + i * stride];
                    }
                }
            }
        }
    }

    fn scatter<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        let stride = self.spec.stride;
        for ci in 0..self.c_in {
            let gc = &mut gx[ci * self.t_in..(ci + 1) * self.t_in];
            for kk in 0..self.k {
                let row = &cols[(ci * self.k + kk) * self.t_out..(ci * self.k + kk + 1) * self.t_out];
                let (lo, hi, p0) = self.valid(kk);
                if hi == lo {
                    continue;
                }
                for (i, &v) in row[lo..hi].iter().enumerate() {
                    gc[p0 + i * stride] += v;
                }
            }
        }
    }
}

impl<T: Real> Var<T> {
    /// Cross-correlation with `weight: [C_out, C_in, K]` and optional
    /// `bias: [C_out]`.
    pub fn conv1d(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: Conv1dSpec) -> Result<Var<T>> {
        let (batch, c_in, t_in, batched) = split_batch(self.shape(), "conv1d")?;
        let &[c_out, wc_in, k] = weight.shape() else {
            return Err(Error::shape("conv1d", format!("weight must be rank 3, got {:?}", weight.shape())));
        };
        if wc_in != c_in || k == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} with weight {:?}, {spec:?}", self.shape(), weight.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv1d", format!("bias {:?} for {c_out} channels", b.shape())));
            }
        }
        let t_out = spec.output_len(t_in, k).ok_or_else(|| {
            Error::shape("conv1d", format!("input length {t_in} too short for kernel {k} {spec:?}"))
        })?;
        let geo = Im2Col { c_in, k, t_in, t_out, spec };
        let ck = c_in * k;
        let mut out = vec![T::zero(); batch * c_out * t_out];
        let mut cols = vec![T::zero(); ck * t_out];
        for b in 0..batch {
            geo.fill(&self.data()[b * c_in * t_in..(b + 1) * c_in * t_in], &mut cols);
            let dst = &mut out[b * c_out * t_out..(b + 1) * c_out * t_out];
            if let Some(bias) = bias {
                for (co, row) in dst.chunks_mut(t_out).enumerate() {
                    row.fill(bias.data()[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(c_out, ck, t_out, T::one(), weight.data(), false, &cols, false, beta, dst);
        }
        let out_shape = if batched { vec![batch, c_out, t_out] } else { vec![c_out, t_out] };
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Var::from_op(
            "conv1d",
            Tensor::new(out_shape, out)?,
            parents,
            Box::new(move |g, _, parents| {
                let (x, w) = (&parents[0], &parents[1]);
                let g = g.data();
                let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
                let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
                let mut cols = vec![T::zero(); ck * t_out];
                for b in 0..batch {
                    let gb = &g[b * c_out * t_out..(b + 1) * c_out * t_out];
                    if let Some(gw) = gw.as_mut() {
                        geo.fill(&x.data()[b * c_in * t_in..(b + 1) * c_in * t_in], &mut cols);
                        T::gemm(c_out, t_out, ck, T::one(), gb, false, &cols, true, T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(ck, c_out, t_out, T::one(), w.data(), true, gb, false, T::zero(), &mut cols);
                        geo.scatter(&cols, &mut gx[b * c_in * t_in..(b + 1) * c_in * t_in]);
                    }
                }
                let gbias = parents.get(2).filter(|p| p.requires_grad()).map(|p| {
                    let mut acc = vec![T::zero(); c_out];
                    for b in 0..batch {
                        for (co, a) in acc.iter_mut().enumerate() {
                            let off = (b * c_out + co) * t_out;
                            *a += g[off..off + t_out].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(p.shape().to_vec(), acc).unwrap()
                });
                let mut res = vec![
                    gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
                    gw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
                ];
                if parents.len() == 3 {
                    res.push(gbias);
                }
                res
            }),
        )
    }

    /// Transposed convolution with `weight: [C_in, C_out, K]`, dropping the
    /// last `trim` samples of the full output. Output sample `n` depends only
    /// on input frames `<= n / stride`.
    pub fn conv_transpose1d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        trim: usize,
    ) -> Result<Var<T>> {
        let (batch, c_in, t_in, batched) = split_batch(self.shape(), "conv_transpose1d")?;
        let &[wc_in, c_out, k] = weight.shape() else {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("weight must be rank 3, got {:?}", weight.shape()),
            ));
        };
        if wc_in != c_in || stride == 0 || k == 0 || t_in == 0 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("input {:?} with weight {:?}, stride {stride}", self.shape(), weight.shape()),
            ));
        }
        let full = (t_in - 1) * stride + k;
        if trim > full {
            return Err(Error::shape("conv_transpose1d", format!("trim {trim} exceeds length {full}")));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv_transpose1d", format!("bias {:?}", b.shape())));
            }
        }
        let t_out = full - trim;
        let ck = c_out * k;
        let mut out = vec![T::zero(); batch * c_out * t_out];
        let mut cols = vec![T::zero(); ck * t_in];
        for b in 0..batch {
            let xb = &self.data()[b * c_in * t_in..(b + 1) * c_in * t_in];
            T::gemm(ck, c_in, t_in, T::one(), weight.data(), true, xb, false, T::zero(), &mut cols);
            let dst = &mut out[b * c_out * t_out..(b + 1) * c_out * t_out];
            for co in 0..c_out {
                let row = &mut dst[co * t_out..(co + 1) * t_out];
                if let Some(bias) = bias {
                    row.fill(bias.data()[co]);
                }
                for kk in 0..k {
                    let src = &cols[(co * k + kk) * t_in..(co * k + kk + 1) * t_in];
                    for (t, &v) in src.iter().enumerate() {
                        let n = t * stride + kk;
                        if n < t_out {
                            row[n] += v;
                        }
                    }
                }
            }
        }
        let out_shape = if batched { vec![batch, c_out, t_out] } else { vec![c_out, t_out] };
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Var::from_op(
            "conv_transpose1d",
            Tensor::new(out_shape, out)?,
            parents,
            Box::new(move |g, _, parents| {
                let (x, w) = (&parents[0], &parents[1]);
                let g = g.data();
                let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
                let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
                let mut dcols = vec![T::zero(); ck * t_in];
                for b in 0..batch {
                    let gb = &g[b * c_out * t_out..(b + 1) * c_out * t_out];
                    for co in 0..c_out {
                        for kk in 0..k {
                            let dst = &mut dcols[(co * k + kk) * t_in..(co * k + kk + 1) * t_in];
                            for (t, d) in dst.iter_mut().enumerate() {
                                let n = t * stride + kk;
                                *d = if n < t_out { gb[co * t_out + n] } else { T::zero() };
                            }
                        }
                    }
                    let xb = &x.data()[b * c_in * t_in..(b + 1) * c_in * t_in];
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[b * c_in * t_in..(b + 1) * c_in * t_in];
                        T::gemm(c_in, ck, t_in, T::one(), w.data(), false, &dcols, false, T::zero(), dst);
                    }
                    if let Some(gw) = gw.as_mut() {
                        T::gemm(c_in, t_in, ck, T::one(), xb, false, &dcols, true, T::one(), gw);
                    }
                }
                let gbias = parents.get(2).filter(|p| p.requires_grad()).map(|p| {
                    let mut acc = vec![T::zero(); c_out];
                    for b in 0..batch {
                        for (co, a) in acc.iter_mut().enumerate() {
                            let off = (b * c_out + co) * t_out;
                            *a += g[off..off + t_out].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(p.shape().to_vec(), acc).unwrap()
                });
                let mut res = vec![
                    gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
                    gw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
                ];
                if parents.len() == 3 {
                    res.push(gbias);
                }
                res
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(shape: &[usize], f: impl Fn(usize) -> f64) -> Var<f64> {
        let n = shape.iter().product();
        Var::leaf(Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap(), true).unwrap()
    }

    fn naive_conv(x: &[f64], c_in: usize, t: usize, w: &[f64], c_out: usize, k: usize, s: Conv1dSpec) -> Vec<f64> {
        let t_out = s.output_len(t, k).unwrap();
        let mut y = vec![0.0; c_out * t_out];
        for co in 0..c_out {
            for to in 0..t_out {
                for ci in 0..c_in {
                    for kk in 0..k {
                        let p = (to * s.stride + kk * s.dilation) as isize - s.left_pad as isize;
                        if p >= 0 && (p as usize) < t {
                            y[co * t_out + to] += w[(co * c_in + ci) * k + kk] * x[ci * t + p as usize];
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (c_in, c_out, k, t) = (3, 2, 3, 11);
        let x = leaf(&[c_in, t], |i| (i as f64 * 0.7).sin());
        let w = leaf(&[c_out, c_in, k], |i| (i as f64 * 1.3).cos());
        for spec in [
            Conv1dSpec::causal(k, 1, 1),
            Conv1dSpec::causal(k, 2, 2),
            Conv1dSpec { stride: 3, dilation: 1, left_pad: 0, right_pad: 2 },
        ] {
            let y = x.conv1d(&w, None, spec).unwrap();
            let yn = naive_conv(x.data(), c_in, t, w.data(), c_out, k, spec);
            assert_eq!(y.shape(), &[c_out, yn.len() / c_out]);
            for (a, b) in y.data().iter().zip(&yn) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_stride_two_length() {
        let x = leaf(&[1, 8], |i| i as f64);
        let w = leaf(&[1, 1, 4], |_| 1.0);
        let y = x.conv1d(&w, None, Conv1dSpec::causal(4, 2, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
    }

    #[test]
    fn transposed_length_and_zero() {
        let x = Var::constant(Tensor::zeros(vec![2, 3]));
        let w = leaf(&[2, 1, 8], |i| i as f64);
        let y = x.conv_transpose1d(&w, None, 4, 4).unwrap();
        assert_eq!(y.shape(), &[1, 12]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_equals_per_item() {
        let x = leaf(&[2, 2, 6], |i| (i as f64).sin());
        let w = leaf(&[3, 2, 3], |i| (i as f64 * 0.3).cos());
        let bias = leaf(&[3], |i| i as f64);
        let spec = Conv1dSpec::causal(3, 1, 2);
        let y = x.conv1d(&w, Some(&bias), spec).unwrap();
        for b in 0..2 {
            let xb = x.narrow(0, b, 1).unwrap().reshape(&[2, 6]).unwrap();
            let yb = xb.conv1d(&w, Some(&bias), spec).unwrap();
            assert_eq!(&y.data()[b * 18..(b + 1) * 18], yb.data());
        }
    }
}
