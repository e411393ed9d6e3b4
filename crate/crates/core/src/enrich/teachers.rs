//! Frozen random teachers, student heads, frame alignment and the cosine
//! distillation loss.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EnrichConfig;
use crate::error::{Error, Result};
use crate::numerics::nn;
use crate::numerics::{concat, Conv1dSpec, ParameterSet, Real, Session, Tensor, Var};

/// Frame teacher strides at 8 kHz: hop 160, i.e. 50 frames per second.
pub const FRAME_STRIDES: [usize; 3] = [4, 5, 8];
const UTT_STRIDES: [usize; 3] = [4, 4, 4];
const UTT_WIDTH: usize = 16;

/// The frozen teacher functions. Their parameters live in their own set,
/// frozen under `teacher`.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub cfg: EnrichConfig,
    pub params: ParameterSet,
}

fn strided_spec(k: usize, s: usize) -> Conv1dSpec {
    Conv1dSpec { stride: s, dilation: 1, left_pad: k - s, right_pad: 0 }
}

impl TeacherBundle {
    pub fn new(cfg: EnrichConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.teacher_seed);
        let mut ps = ParameterSet::new();
        let widths = [16, cfg.frame_dim, cfg.frame_dim];
        let mut c_in = 1;
        for (i, (&s, &c)) in FRAME_STRIDES.iter().zip(&widths).enumerate() {
            nn::init_conv(&mut ps, &format!("teacher.frame.conv{i}"), c, c_in, 2 * s, &mut rng)?;
            c_in = c;
        }
        let mut c_in = 1;
        for (i, &s) in UTT_STRIDES.iter().enumerate() {
            nn::init_conv(&mut ps, &format!("teacher.utt.conv{i}"), UTT_WIDTH, c_in, 2 * s, &mut rng)?;
            c_in = UTT_WIDTH;
        }
        nn::init_linear(&mut ps, "teacher.utt.out", UTT_WIDTH, cfg.utt_dim, &mut rng)?;
        ps.freeze("teacher");
        Ok(Self { cfg, params: ps })
    }

    pub fn frame_hop() -> usize {
        FRAME_STRIDES.iter().product()
    }

    /// Teacher frames for `n_samples` of audio.
    pub fn frame_count(n_samples: usize) -> usize {
        n_samples.div_ceil(Self::frame_hop())
    }
}

fn pad_to<T: Real>(x: &Var<T>, multiple: usize) -> Result<Var<T>> {
    let &[b, len] = x.shape() else {
        return Err(Error::shape("teacher", format!("waveform batch must be [B, L], got {:?}", x.shape())));
    };
    let target = len.div_ceil(multiple) * multiple;
    if target == len {
        return Ok(x.clone());
    }
    concat(&[x.clone(), Var::constant(Tensor::zeros(vec![b, target - len]))], 1)
}

/// Frame-level teacher `[B, L] -> [B, T_r, frame_dim]`, detached from the
/// graph.
pub fn frame_teacher<T: Real>(s: &Session<T>, x: &Var<T>) -> Result<Var<T>> {
    let x = pad_to(x, TeacherBundle::frame_hop())?;
    let (b, len) = (x.shape()[0], x.shape()[1]);
    let mut h = x.detach().reshape(&[b, 1, len])?;
    for (i, &st) in FRAME_STRIDES.iter().enumerate() {
        h = nn::conv(s, &format!("teacher.frame.conv{i}"), &h, strided_spec(2 * st, st))?.tanh()?;
    }
    Ok(h.transpose(1, 2)?.detach())
}

/// Utterance-level teacher `[B, L] -> [B, utt_dim]`, unit-normalized and
/// detached.
pub fn utterance_teacher<T: Real>(s: &Session<T>, x: &Var<T>) -> Result<Var<T>> {
    let x = pad_to(x, UTT_STRIDES.iter().product())?;
    let (b, len) = (x.shape()[0], x.shape()[1]);
    let mut h = x.detach().reshape(&[b, 1, len])?;
    for (i, &st) in UTT_STRIDES.iter().enumerate() {
        h = nn::conv(s, &format!("teacher.utt.conv{i}"), &h, strided_spec(2 * st, st))?.tanh()?;
    }
    let pooled = h.mean_axis(2)?;
    let e = nn::linear(s, "teacher.utt.out", &pooled)?;
    let norm = e.square()?.sum_axis(1)?.sqrt()?.reshape(&[b, 1])?;
    Ok(e.div(&norm)?.detach())
}

/// Student heads: two-layer perceptrons with hidden width `4 * d_z`.
pub fn init_heads(ps: &mut ParameterSet, cfg: &EnrichConfig, d_z: usize, rng: &mut impl rand::Rng) -> Result<()> {
    nn::init_linear(ps, "heads.frame.fc1", d_z, 4 * d_z, rng)?;
    nn::init_linear(ps, "heads.frame.fc2", 4 * d_z, cfg.frame_dim, rng)?;
    nn::init_linear(ps, "heads.utt.fc1", d_z, 4 * d_z, rng)?;
    nn::init_linear(ps, "heads.utt.fc2", 4 * d_z, cfg.utt_dim, rng)
}

pub fn head<T: Real>(s: &Session<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let h = nn::linear(s, &format!("{prefix}.fc1"), x)?.gelu()?;
    nn::linear(s, &format!("{prefix}.fc2"), &h)
}

/// Linear interpolation of `[B, T, D]` (or `[T, D]`) along time to
/// `target` frames, with the end frames pinned.
pub fn align_frames<T: Real>(z: &Var<T>, target: usize) -> Result<Var<T>> {
    if target < 1 {
        return Err(Error::invalid("align_frames: target length must be at least 1"));
    }
    let shape = z.shape().to_vec();
    let (b, t, d) = match *shape.as_slice() {
        [t, d] => (1, t, d),
        [b, t, d] => (b, t, d),
        _ => return Err(Error::shape("align_frames", format!("{shape:?}"))),
    };
    if t == target {
        return Ok(z.clone());
    }
    if t == 0 {
        return Err(Error::shape("align_frames", "empty sequence".to_string()));
    }
    let mut i0 = Vec::with_capacity(b * target * d);
    let mut i1 = Vec::with_capacity(b * target * d);
    let mut w = Vec::with_capacity(b * target * d);
    for bi in 0..b {
        for j in 0..target {
            let pos = if target == 1 { 0.0 } else { j as f64 * (t - 1) as f64 / (target - 1) as f64 };
            let lo = (pos.floor() as usize).min(t - 1);
            let hi = (lo + 1).min(t - 1);
            let frac = pos - lo as f64;
            for k in 0..d {
                i0.push((bi * t + lo) * d + k);
                i1.push((bi * t + hi) * d + k);
                w.push(T::from_f64(frac));
            }
        }
    }
    let mut out_shape = shape.clone();
    let axis = out_shape.len() - 2;
    out_shape[axis] = target;
    let a = z.gather(Rc::new(i0), &out_shape)?;
    let c = z.gather(Rc::new(i1), &out_shape)?;
    // a + frac * (c - a) keeps constant sequences exactly constant
    a.add(&c.sub(&a)?.mul(&Var::constant(Tensor::new(out_shape.clone(), w)?))?)
}

/// Row-wise cosine similarity of `[N, D]` arrays; `which` names the
/// teacher in the zero-norm error.
pub fn cosine_rows<T: Real>(a: &Var<T>, b: &Var<T>, which: &'static str) -> Result<Var<T>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape("cosine", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let na = a.square()?.sum_axis(1)?;
    let nb = b.square()?.sum_axis(1)?;
    for (i, (x, y)) in na.data().iter().zip(nb.data()).enumerate() {
        if *x == T::zero() || *y == T::zero() {
            return Err(Error::ZeroNorm { which, frame: i });
        }
    }
    a.mul(b)?.sum_axis(1)?.div(&na.mul(&nb)?.sqrt()?)
}

/// Components of the distillation objective.
pub struct DistillTerms<T: Real> {
    pub frame: Var<T>,
    pub utterance: Var<T>,
    pub total: Var<T>,
}

/// `sum_r lambda_r (1 - cos(H_r(A_r(z)), sg(F_r(x))))`, with the frame term
/// averaged over aligned frames and the utterance term computed on
/// mean-pooled latents. `z: [B, T_z, d_z]`, `x: [B, L]`.
pub fn distill_loss<T: Real>(s: &Session<T>, cfg: &EnrichConfig, z: &Var<T>, x: &Var<T>) -> Result<DistillTerms<T>> {
    let (b, d) = (z.shape()[0], z.shape()[2]);
    let ft = frame_teacher(s, x)?;
    let tr = ft.shape()[1];
    let aligned = align_frames(z, tr)?;
    let pred = head(s, "heads.frame", &aligned)?.reshape(&[b * tr, cfg.frame_dim])?;
    let frame_cos = cosine_rows(&pred, &ft.reshape(&[b * tr, cfg.frame_dim])?, "frame")?;
    let frame = frame_cos.neg()?.add_scalar(1.0)?.mean()?;

    let ut = utterance_teacher(s, x)?;
    let pooled = z.mean_axis(1)?.reshape(&[b, d])?;
    let upred = head(s, "heads.utt", &pooled)?;
    let utterance = cosine_rows(&upred, &ut, "utterance")?.neg()?.add_scalar(1.0)?.mean()?;
    let total = frame.scale(cfg.lambda_frame)?.add(&utterance.scale(cfg.lambda_utt)?)?;
    Ok(DistillTerms { frame, utterance, total })
}
