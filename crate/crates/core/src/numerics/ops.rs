//! Elementwise arithmetic, reductions and shape manipulation.

use std::rc::Rc;

use super::real::Real;
use super::tensor::{numel, Tensor};
use super::var::Var;
use crate::error::{Error, Result};

fn c<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into `in_shape` under
/// broadcasting.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        let oi = i + rank - in_shape.len();
        if in_shape[i] != 1 {
            eff[oi] = in_strides[i];
        }
    }
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

enum Bcast {
    Same,
    Scalar,
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            Bcast::Same
        } else if numel(input) == 1 {
            Bcast::Scalar
        } else {
            Bcast::Map(broadcast_map(out, input))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Map(m) => m[i],
        }
    }
}

type BinFn<T> = fn(T, T) -> T;
/// Local derivative given (a, b, out).
type BinGrad<T> = fn(T, T, T) -> T;

fn binary<T: Real>(
    name: &'static str,
    a: &Var<T>,
    b: &Var<T>,
    f: BinFn<T>,
    da: BinGrad<T>,
    db: BinGrad<T>,
) -> Result<Var<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    let ma = Rc::new(Bcast::new(&out_shape, a.shape()));
    let mb = Rc::new(Bcast::new(&out_shape, b.shape()));
    let (av, bv) = (a.data(), b.data());
    let n = numel(&out_shape);
    let data: Vec<T> = match (&*ma, &*mb) {
        (Bcast::Same, Bcast::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..n).map(|i| f(av[ma.at(i)], bv[mb.at(i)])).collect(),
    };
    let value = Tensor::new(out_shape, data)?;
    Var::from_op(
        name,
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g, out, parents| {
            let (av, bv) = (parents[0].data(), parents[1].data());
            let (g, o) = (g.data(), out.data());
            let mut ga = None;
            let mut gb = None;
            if parents[0].requires_grad() {
                let mut acc = vec![T::zero(); av.len()];
                for i in 0..g.len() {
                    let (ia, ib) = (ma.at(i), mb.at(i));
                    acc[ia] += g[i] * da(av[ia], bv[ib], o[i]);
                }
                ga = Some(Tensor::new(parents[0].shape().to_vec(), acc).unwrap());
            }
            if parents[1].requires_grad() {
                let mut acc = vec![T::zero(); bv.len()];
                for i in 0..g.len() {
                    let (ia, ib) = (ma.at(i), mb.at(i));
                    acc[ib] += g[i] * db(av[ia], bv[ib], o[i]);
                }
                gb = Some(Tensor::new(parents[1].shape().to_vec(), acc).unwrap());
            }
            vec![ga, gb]
        }),
    )
}

/// Local derivative given (x, out).
type UnGrad<T> = fn(T, T) -> T;

fn unary<T: Real>(
    name: &'static str,
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: UnGrad<T>,
) -> Result<Var<T>> {
    let value = x.value().map(f);
    Var::from_op(
        name,
        value,
        vec![x.clone()],
        Box::new(move |g, out, parents| {
            let xv = parents[0].data();
            let data = g
                .data()
                .iter()
                .zip(xv)
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(parents[0].shape().to_vec(), data).unwrap())]
        }),
    )
}

/// Unary op whose derivative depends on a captured constant.
fn unary_with<T: Real>(
    name: &'static str,
    x: &Var<T>,
    k: T,
    f: fn(T, T) -> T,
    df: fn(T, T, T) -> T,
) -> Result<Var<T>> {
    let value = x.value().map(|v| f(v, k));
    Var::from_op(
        name,
        value,
        vec![x.clone()],
        Box::new(move |g, out, parents| {
            let xv = parents[0].data();
            let data = g
                .data()
                .iter()
                .zip(xv)
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y, k))
                .collect();
            vec![Some(Tensor::new(parents[0].shape().to_vec(), data).unwrap())]
        }),
    )
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        binary("add", self, other, |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        binary("sub", self, other, |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        binary("mul", self, other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b, _| T::one() / b,
            |a, b, _| -a / (b * b),
        )
    }

    pub fn neg(&self) -> Result<Var<T>> {
        unary("neg", self, |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, k: f64) -> Result<Var<T>> {
        unary_with("scale", self, T::from_f64(k), |x, k| x * k, |_, _, k| k)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var<T>> {
        unary_with("add_scalar", self, T::from_f64(k), |x, k| x + k, |_, _, _| T::one())
    }

    pub fn exp(&self) -> Result<Var<T>> {
        unary("exp", self, |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Var<T>> {
        unary("log", self, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sin(&self) -> Result<Var<T>> {
        unary("sin", self, |x| x.sin(), |x, _| x.cos())
    }

    pub fn tanh(&self) -> Result<Var<T>> {
        unary("tanh", self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        unary("sigmoid", self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        unary("sqrt", self, |x| x.sqrt(), |_, y| c::<T>(0.5) / y)
    }

    pub fn square(&self) -> Result<Var<T>> {
        unary("square", self, |x| x * x, |x, _| c::<T>(2.0) * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Result<Var<T>> {
        unary("abs", self, |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<T>> {
        unary_with(
            "leaky_relu",
            self,
            T::from_f64(slope),
            |x, s| if x > T::zero() { x } else { x * s },
            |x, _, s| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Result<Var<T>> {
        unary("gelu", self, gelu, gelu_grad)
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Result<Var<T>> {
        unary(
            "softplus",
            self,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid(x),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<T>> {
        let (lo_t, hi_t) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.value().map(|x| x.max(lo_t).min(hi_t));
        Var::from_op(
            "clamp",
            value,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let data = g
                    .data()
                    .iter()
                    .zip(parents[0].data())
                    .map(|(&g, &x)| if x > lo_t && x < hi_t { g } else { T::zero() })
                    .collect();
                vec![Some(Tensor::new(parents[0].shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Var<T>> {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn sum(&self) -> Result<Var<T>> {
        let s: T = self.data().iter().copied().sum();
        Var::from_op(
            "sum",
            Tensor::scalar(s),
            vec![self.clone()],
            Box::new(|g, _, parents| {
                vec![Some(Tensor::filled(parents[0].shape().to_vec(), g.data()[0]))]
            }),
        )
    }

    pub fn mean(&self) -> Result<Var<T>> {
        if self.numel() == 0 {
            return Err(Error::shape("mean", "empty array"));
        }
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Var::from_op(
            "sum_axis",
            Tensor::new(out_shape, out)?,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let g = g.data();
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx).unwrap())]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        if len == 0 {
            return Err(Error::shape("mean_axis", "empty axis"));
        }
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        let value = self.value().clone().reshape(shape.to_vec())?;
        Var::from_op(
            "reshape",
            value,
            vec![self.clone()],
            Box::new(|g, _, parents| {
                vec![Some(g.clone().reshape(parents[0].shape().to_vec()).unwrap())]
            }),
        )
    }

    /// `out[i] = self[indices[i]]` over flat storage; backward scatter-adds.
    pub fn gather(&self, indices: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<T>> {
        if numel(out_shape) != indices.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {:?}", indices.len(), out_shape),
            ));
        }
        let x = self.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", x.len()),
            ));
        }
        let data = indices.iter().map(|&i| x[i]).collect();
        Var::from_op(
            "gather",
            Tensor::new(out_shape.to_vec(), data)?,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let mut gx = vec![T::zero(); parents[0].numel()];
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                vec![Some(Tensor::new(parents[0].shape().to_vec(), gx).unwrap())]
            }),
        )
    }

    /// Swap two axes.
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(Error::shape("transpose", format!("axes {d0},{d1} of {shape:?}")));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(d0, d1);
        let in_strides = strides(&shape);
        let mut perm_strides = in_strides.clone();
        perm_strides.swap(d0, d1);
        let n = self.numel();
        let rank = shape.len();
        let mut idx = vec![0usize; rank];
        let mut map = Vec::with_capacity(n);
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += perm_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= perm_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        self.gather(Rc::new(map), &out_shape)
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Var<T>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("t", format!("expected rank 2, got {:?}", self.shape())));
        }
        self.transpose(0, 1)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            map.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(Rc::new(map), &out_shape)
    }

    /// Rows of a rank-2 array (embedding lookup).
    pub fn index_rows(&self, rows: &[usize]) -> Result<Var<T>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("index_rows", format!("{:?}", self.shape())));
        }
        let cols = self.shape()[1];
        let n_rows = self.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::invalid(format!("row {bad} out of range {n_rows}")));
        }
        let map: Vec<usize> = rows
            .iter()
            .flat_map(|&r| r * cols..(r + 1) * cols)
            .collect();
        self.gather(Rc::new(map), &[rows.len(), cols])
    }

    /// Picks `self[i, targets[i]]` from a rank-2 array.
    pub fn pick(&self, targets: &[usize]) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("pick", format!("{:?} with {} targets", s, targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(Error::invalid(format!("target {bad} outside {} classes", s[1])));
        }
        let cols = s[1];
        let map = targets.iter().enumerate().map(|(i, &t)| i * cols + t).collect();
        self.gather(Rc::new(map), &[targets.len()])
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Real>(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
    }
    for p in parts {
        let ok = p.shape().len() == rank
            && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &l) in parts.iter().zip(&lens) {
            let chunk = l * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total;
    Var::from_op(
        "concat",
        Tensor::new(out_shape, out)?,
        parts.to_vec(),
        Box::new(move |g, _, parents| {
            let g = g.data();
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    let chunk = l * inner;
                    gi.extend_from_slice(&g[off..off + chunk]);
                    off += chunk;
                }
            }
            grads
                .into_iter()
                .zip(parents)
                .map(|(gi, p)| {
                    p.requires_grad()
                        .then(|| Tensor::new(p.shape().to_vec(), gi).unwrap())
                })
                .collect()
        }),
    )
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let k = c::<T>(GELU_K);
    let inner = k * (x + c::<T>(0.044715) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T, _y: T) -> T {
    let k = c::<T>(GELU_K);
    let inner = k * (x + c::<T>(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = k * (T::one() + c::<T>(3.0 * 0.044715) * x * x);
    c::<T>(0.5) * (T::one() + th) + c::<T>(0.5) * x * (T::one() - th * th) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(shape: &[usize], data: &[f64]) -> Var<f64> {
        Var::leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap(), true).unwrap()
    }

    #[test]
    fn broadcasting_add_and_reduce_grad() {
        let a = v(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = v(&[3], &[10., 20., 30.]);
        let y = a.add(&b).unwrap();
        assert_eq!(y.data(), &[11., 22., 33., 14., 25., 36.]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2., 2., 2.]);
        assert_eq!(a.grad().unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn column_broadcast() {
        let a = v(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = v(&[2, 1], &[1., 2.]);
        let y = a.mul(&b).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 8., 10., 12.]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap().data(), &[6., 15.]);
    }

    #[test]
    fn incompatible_broadcast_is_error() {
        let a = v(&[2, 3], &[0.; 6]);
        let b = v(&[2], &[0.; 2]);
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_is_error() {
        let a = v(&[1], &[-1.0]);
        assert!(matches!(a.log(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn transpose_narrow_concat() {
        let a = v(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(a.t().unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(a.narrow(1, 1, 2).unwrap().data(), &[2., 3., 5., 6.]);
        let c = concat(&[a.clone(), a.narrow(0, 0, 1).unwrap()], 0).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.data()[6..], [1., 2., 3.]);
        c.sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[2., 2., 2., 1., 1., 1.]);
    }

    #[test]
    fn sum_axis_middle() {
        let a = v(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let s = a.sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 6., 12., 14.]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = v(&[2], &[1., 2.]);
        let y = a.detach().mul(&a).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1., 2.]);
    }
}
