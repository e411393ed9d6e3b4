//! Temporal variational bottleneck: causal recurrent posterior, affine
//! coupling flow and the Monte-Carlo KL estimator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::CodecConfig;
use crate::error::{Error, Result};
use crate::numerics::nn;
use crate::numerics::{concat, ParameterSet, Real, Session, Tensor, Var};

pub const LOG_SIGMA_MIN: f64 = -9.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;

/// Diagonal Gaussian posterior over `[B, T, d]` latents.
#[derive(Debug, Clone)]
pub struct Posterior<T: Real> {
    pub mu: Var<T>,
    pub log_sigma: Var<T>,
}

/// Project-in, unidirectional LSTM stack, project-out. A zero projection
/// makes the path start as exactly zero.
pub(crate) fn init_recurrent(
    ps: &mut ParameterSet,
    prefix: &str,
    cfg: &CodecConfig,
    zero_out: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    let (d, w) = (cfg.latent_dim, cfg.lstm_hidden);
    nn::init_linear(ps, &format!("{prefix}.proj_in"), d, w, rng)?;
    let std = 1.0 / (w as f64).sqrt();
    for l in 0..cfg.lstm_layers {
        ps.init_normal(format!("{prefix}.lstm{l}.w_ih"), &[w, 4 * w], std, rng)?;
        ps.init_normal(format!("{prefix}.lstm{l}.w_hh"), &[w, 4 * w], std, rng)?;
        ps.init_const(format!("{prefix}.lstm{l}.bias"), &[4 * w], 0.0)?;
    }
    if zero_out {
        nn::init_linear_zero(ps, &format!("{prefix}.proj_out"), w, d)
    } else {
        nn::init_linear(ps, &format!("{prefix}.proj_out"), w, d, rng)
    }
}

pub(crate) fn recurrent<T: Real>(s: &Session<T>, prefix: &str, cfg: &CodecConfig, z: &Var<T>) -> Result<Var<T>> {
    let mut h = nn::linear(s, &format!("{prefix}.proj_in"), z)?;
    for l in 0..cfg.lstm_layers {
        let p = |n: &str| s.p(&format!("{prefix}.lstm{l}.{n}"));
        h = h.lstm_layer(&p("w_ih")?, &p("w_hh")?, &p("bias")?)?;
    }
    nn::linear(s, &format!("{prefix}.proj_out"), &h)
}

pub(crate) fn init_posterior(ps: &mut ParameterSet, cfg: &CodecConfig, rng: &mut impl Rng) -> Result<()> {
    // the posterior mean starts at the deterministic latent
    init_recurrent(ps, "bottleneck", cfg, true, rng)?;
    let d = cfg.latent_dim;
    ps.init_const("bottleneck.stats.weight", &[d, 2 * d], 0.0)?;
    let mut bias = vec![0.0; 2 * d];
    bias[d..].fill(cfg.log_sigma_init);
    ps.insert("bottleneck.stats.bias", Tensor::new(vec![2 * d], bias)?)
}

/// `q(z | z_in)`: the recurrent path refines `z_in` residually and a
/// pointwise projection emits mean offsets and log-scales.
pub fn posterior<T: Real>(s: &Session<T>, cfg: &CodecConfig, z_in: &Var<T>) -> Result<Posterior<T>> {
    let d = cfg.latent_dim;
    if z_in.shape().last() != Some(&d) {
        return Err(Error::shape("posterior", format!("{:?} for latent dim {d}", z_in.shape())));
    }
    let h = z_in.add(&recurrent(s, "bottleneck", cfg, z_in)?)?;
    let stats = nn::linear(s, "bottleneck.stats", &h)?;
    let axis = stats.shape().len() - 1;
    let mu = h.add(&stats.narrow(axis, 0, d)?)?;
    let log_sigma = stats.narrow(axis, d, d)?.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    Ok(Posterior { mu, log_sigma })
}

/// `mu + exp(log_sigma) * eps`; `eps` is a constant.
pub fn sample_reparameterized<T: Real>(p: &Posterior<T>, eps: &Tensor<T>) -> Result<Var<T>> {
    if eps.shape() != p.mu.shape() {
        return Err(Error::shape(
            "sample_reparameterized",
            format!("noise {:?} for posterior {:?}", eps.shape(), p.mu.shape()),
        ));
    }
    p.mu.add(&p.log_sigma.exp()?.mul(&Var::constant(eps.clone()))?)
}

pub fn standard_normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(StandardNormal.sample(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

pub(crate) fn init_flow(ps: &mut ParameterSet, cfg: &CodecConfig, rng: &mut impl Rng) -> Result<()> {
    let half = cfg.latent_dim / 2;
    for l in 0..cfg.flow_layers {
        nn::init_linear(ps, &format!("bottleneck.flow.{l}.fc1"), half, cfg.flow_hidden, rng)?;
        // zero output layer: every coupling starts as the identity
        nn::init_linear_zero(ps, &format!("bottleneck.flow.{l}.fc2"), cfg.flow_hidden, cfg.latent_dim)?;
    }
    Ok(())
}

/// Applies the coupling stack to rows of `[N, d]`; returns the transformed
/// rows and the per-row log-determinant `[N]`.
pub fn flow_forward<T: Real>(s: &Session<T>, cfg: &CodecConfig, z: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let half = cfg.latent_dim / 2;
    let n = z.shape()[0];
    let mut a = z.narrow(1, 0, half)?;
    let mut b = z.narrow(1, half, half)?;
    let mut logdet = Var::constant(Tensor::zeros(vec![n]));
    for l in 0..cfg.flow_layers {
        let (cond, target) = if l % 2 == 0 { (&a, &b) } else { (&b, &a) };
        let h = nn::linear(s, &format!("bottleneck.flow.{l}.fc1"), cond)?.tanh()?;
        let st = nn::linear(s, &format!("bottleneck.flow.{l}.fc2"), &h)?;
        let log_scale = st.narrow(1, 0, half)?.tanh()?;
        let shift = st.narrow(1, half, half)?;
        let moved = target.mul(&log_scale.exp()?)?.add(&shift)?;
        logdet = logdet.add(&log_scale.sum_axis(1)?)?;
        if l % 2 == 0 {
            b = moved;
        } else {
            a = moved;
        }
    }
    Ok((concat(&[a, b], 1)?, logdet))
}

/// Plain `f64` coupling pass (forward or inverse) used by the round-trip
/// check.
fn flow_numeric(ps: &Session<'_, impl Real>, cfg: &CodecConfig, rows: &[f64], inverse: bool) -> Result<Vec<f64>> {
    let d = cfg.latent_dim;
    let half = d / 2;
    let mut out = rows.to_vec();
    let layers: Vec<usize> = if inverse {
        (0..cfg.flow_layers).rev().collect()
    } else {
        (0..cfg.flow_layers).collect()
    };
    let get = |n: &str| ps.tensor(n);
    for l in layers {
        let w1 = get(&format!("bottleneck.flow.{l}.fc1.weight"))?;
        let b1 = get(&format!("bottleneck.flow.{l}.fc1.bias"))?;
        let w2 = get(&format!("bottleneck.flow.{l}.fc2.weight"))?;
        let b2 = get(&format!("bottleneck.flow.{l}.fc2.bias"))?;
        let hid = b1.numel();
        for row in out.chunks_mut(d) {
            let (ca, tb) = if l % 2 == 0 { (0, half) } else { (half, 0) };
            let cond: Vec<f64> = row[ca..ca + half].to_vec();
            let h: Vec<f64> = (0..hid)
                .map(|j| (b1.data()[j] + (0..half).map(|i| cond[i] * w1.data()[i * hid + j]).sum::<f64>()).tanh())
                .collect();
            for i in 0..half {
                let st = |c: usize| b2.data()[c] + (0..hid).map(|j| h[j] * w2.data()[j * d + c]).sum::<f64>();
                let ls = st(i).tanh();
                let sh = st(half + i);
                let v = &mut row[tb + i];
                *v = if inverse { (*v - sh) * (-ls).exp() } else { *v * ls.exp() + sh };
            }
        }
    }
    Ok(out)
}

/// Relative error of `inverse(forward(rows))`.
pub fn flow_round_trip_error<T: Real>(s: &Session<T>, cfg: &CodecConfig, rows: &[f64]) -> Result<f64> {
    let fwd = flow_numeric(s, cfg, rows, false)?;
    let back = flow_numeric(s, cfg, &fwd, true)?;
    let num: f64 = rows.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = rows.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
    Ok(num / den)
}

/// Tolerance of the flow round-trip check.
pub const FLOW_ROUND_TRIP_TOL: f64 = 1e-6;

/// Monte-Carlo estimate of `KL(q || N(0, I))` through the flow, averaged
/// over frames and over the draws in `noise` (each shaped like the
/// posterior). Per frame and draw the estimator is
/// `log q(z0) - sum log|det J| - log N(zK; 0, I)`.
pub fn kl_with_flow<T: Real>(s: &Session<T>, cfg: &CodecConfig, p: &Posterior<T>, noise: &[Tensor<T>]) -> Result<Var<T>> {
    let d = cfg.latent_dim;
    if noise.is_empty() {
        return Err(Error::invalid("kl estimate needs at least one draw"));
    }
    let rows = p.mu.numel() / d;
    let mut total: Option<Var<T>> = None;
    for eps in noise {
        let z0 = sample_reparameterized(p, eps)?.reshape(&[rows, d])?;
        let check: Vec<f64> = z0.data().iter().map(|&v| Real::to_f64(v)).collect();
        let err = flow_round_trip_error(s, cfg, &check)?;
        if !(err < FLOW_ROUND_TRIP_TOL) {
            return Err(Error::FlowInvertibility { rel_err: err });
        }
        let (zk, logdet) = flow_forward(s, cfg, &z0)?;
        let log_q = Var::constant(eps.map(|e| T::from_f64(-0.5) * e * e))
            .sub(&p.log_sigma)?
            .sum()?;
        let term = log_q
            .sub(&logdet.sum()?)?
            .add(&zk.square()?.sum()?.scale(0.5)?)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / (rows * noise.len()) as f64)
}

/// Per-frame, per-draw estimator values without a graph; used to attach
/// standard errors to the estimate.
pub fn kl_samples(s: &Session<f64>, cfg: &CodecConfig, p: &Posterior<f64>, noise: &[Tensor<f64>]) -> Result<Vec<f64>> {
    let d = cfg.latent_dim;
    let rows = p.mu.numel() / d;
    let mut out = Vec::with_capacity(rows * noise.len());
    for eps in noise {
        let z0 = sample_reparameterized(p, eps)?.reshape(&[rows, d])?;
        let (zk, logdet) = flow_forward(s, cfg, &z0)?;
        for r in 0..rows {
            let mut v = -logdet.data()[r];
            for j in 0..d {
                let e = eps.data()[r * d + j];
                v += -0.5 * e * e - p.log_sigma.data()[r * d + j] + 0.5 * zk.data()[r * d + j].powi(2);
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))` summed over dimensions and
/// averaged over frames.
pub fn kl_closed_form(mu: &[f64], log_sigma: &[f64], d: usize) -> f64 {
    let rows = mu.len() / d;
    let total: f64 = mu
        .iter()
        .zip(log_sigma)
        .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum();
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_standard_stats_with_zero_bias() {
        let codec = Codec::toy();
        let mut ps = codec.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ps.set("bottleneck.stats.bias", Tensor::zeros(vec![16])).unwrap();
        let s: Session<f64> = Session::eval(&ps);
        let p = posterior(&s, &codec.cfg, &Var::constant(Tensor::zeros(vec![1, 6, 8]))).unwrap();
        assert!(p.mu.data().iter().all(|&v| v == 0.0));
        assert!(p.log_sigma.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reparameterization_cases() {
        let mu = Var::constant(Tensor::new(vec![1, 1, 2], vec![0.5, -1.0]).unwrap());
        let p = Posterior { mu: mu.clone(), log_sigma: Var::constant(Tensor::zeros(vec![1, 1, 2])) };
        let z = sample_reparameterized(&p, &Tensor::zeros(vec![1, 1, 2])).unwrap();
        assert_eq!(z.data(), mu.data());
        let z = sample_reparameterized(&p, &Tensor::filled(vec![1, 1, 2], 1.0)).unwrap();
        assert_eq!(z.data(), &[1.5, 0.0]);
        assert!(sample_reparameterized(&p, &Tensor::zeros(vec![2, 1, 2])).is_err());
    }

    #[test]
    fn identity_flow_has_zero_logdet_and_trained_flow_inverts() {
        let codec = Codec::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = codec.init_params(&mut rng).unwrap();
        let z = standard_normal::<f64>(&[10, 8], &mut rng);
        {
            let s: Session<f64> = Session::eval(&ps);
            let (zk, ld) = flow_forward(&s, &codec.cfg, &Var::constant(z.clone())).unwrap();
            assert_eq!(zk.data(), z.data());
            assert!(ld.data().iter().all(|&v| v == 0.0));
        }
        for l in 0..2 {
            let name = format!("bottleneck.flow.{l}.fc2.weight");
            let t = standard_normal::<f64>(ps.get(&name).unwrap().shape(), &mut rng).map(|v| 0.5 * v);
            ps.set(&name, t).unwrap();
        }
        let s: Session<f64> = Session::eval(&ps);
        let err = flow_round_trip_error(&s, &codec.cfg, z.data()).unwrap();
        assert!(err < 1e-12, "{err}");
        let (zk, _) = flow_forward(&s, &codec.cfg, &Var::constant(z.clone())).unwrap();
        assert!(zk.value().max_abs_diff(&z) > 1e-3);
    }
}
