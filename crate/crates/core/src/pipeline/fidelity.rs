//! Empirical check of the AE-to-VAE distortion bound
//! `E‖x − G(z_VAE)‖² ≤ 2 E‖x − G(z_AE)‖² + 2 L² E‖z_VAE − z_AE‖²`.
//!
//! Norms are summed over the whole utterance (waveform samples, or frames
//! times dimensions) and averaged over utterances, which makes `L` the
//! operator norm of the decoder between those spaces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::stages::Tokenizer;
use crate::codec::bottleneck::{posterior, standard_normal};
use crate::dsp::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numerics::{Session, Tensor, Var};

/// Safety factor applied to the probed Lipschitz estimate.
pub const LIPSCHITZ_SAFETY: f64 = 2.0;
/// Probe radius relative to the RMS of the latent sequence.
pub const PROBE_RADIUS: f64 = 1e-2;

/// A decoder under test: latent `[T, d]` to waveform.
pub trait LatentDecoder {
    fn decode(&self, z: &Tensor<f64>) -> Result<Vec<f64>>;
}

/// One evaluation utterance with both of its latent sequences.
#[derive(Debug, Clone)]
pub struct FidelitySample {
    pub x: Vec<f64>,
    pub z_ae: Tensor<f64>,
    pub z_vae: Tensor<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub eps_ae: f64,
    pub delta_shift: f64,
    pub l_hat: f64,
    pub lhs: f64,
    /// `2 eps_ae + 2 (safety · l_hat)² delta_shift`.
    pub rhs: f64,
    pub safety: f64,
    pub n_samples: usize,
    pub n_probes: usize,
    pub pass: bool,
    /// The Lipschitz constant is estimated, so the verdict is statistical.
    pub statistical: bool,
}

impl FidelityReport {
    /// Right-hand side with an externally supplied Lipschitz constant.
    pub fn rhs_with(&self, lipschitz: f64) -> f64 {
        2.0 * self.eps_ae + 2.0 * lipschitz * lipschitz * self.delta_shift
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn decode_for(dec: &impl LatentDecoder, z: &Tensor<f64>, len: usize) -> Result<Vec<f64>> {
    let mut y = dec.decode(z)?;
    if y.len() < len {
        return Err(Error::shape("fidelity", format!("decoded {} samples for a {len}-sample utterance", y.len())));
    }
    y.truncate(len);
    Ok(y)
}

/// Measures both sides of the bound. Probe `i` sits on utterance
/// `i mod n` at a uniform point of the AE-to-VAE segment; even probes move
/// in an isotropic direction, odd ones along the shift.
pub fn fidelity_bound_report(
    dec: &impl LatentDecoder,
    samples: &[FidelitySample],
    n_probes: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if samples.is_empty() {
        return Err(Error::invalid("fidelity report needs a non-empty evaluation set"));
    }
    let n = samples.len() as f64;
    let (mut eps_ae, mut delta, mut lhs) = (0.0, 0.0, 0.0);
    for s in samples {
        if s.z_ae.shape() != s.z_vae.shape() {
            return Err(Error::shape("fidelity", format!("{:?} vs {:?}", s.z_ae.shape(), s.z_vae.shape())));
        }
        eps_ae += sq_dist(&s.x, &decode_for(dec, &s.z_ae, s.x.len())?);
        lhs += sq_dist(&s.x, &decode_for(dec, &s.z_vae, s.x.len())?);
        delta += sq_dist(s.z_ae.data(), s.z_vae.data());
    }
    let (eps_ae, delta, lhs) = (eps_ae / n, delta / n, lhs / n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l_hat: f64 = 0.0;
    for i in 0..n_probes {
        let s = &samples[i % samples.len()];
        let shift: Vec<f64> = s.z_vae.data().iter().zip(s.z_ae.data()).map(|(v, a)| v - a).collect();
        let u: f64 = rng.random_range(0.0..=1.0);
        let base: Vec<f64> = s.z_ae.data().iter().zip(&shift).map(|(a, d)| a + u * d).collect();
        let along = i % 2 == 1 && shift.iter().any(|&v| v != 0.0);
        let dir: Vec<f64> = if along { shift.clone() } else { standard_normal::<f64>(&[shift.len()], &mut rng).data().to_vec() };
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rms = (s.z_ae.sum_sq() / s.z_ae.numel() as f64).sqrt().max(1e-12);
        let radius = PROBE_RADIUS * rms * (shift.len() as f64).sqrt();
        let step: Vec<f64> = dir.iter().map(|v| v / norm * radius).collect();
        let moved: Vec<f64> = base.iter().zip(&step).map(|(b, d)| b + d).collect();
        let shape = s.z_ae.shape().to_vec();
        let g0 = dec.decode(&Tensor::new(shape.clone(), base)?)?;
        let g1 = dec.decode(&Tensor::new(shape, moved)?)?;
        let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        l_hat = l_hat.max(sq_dist(&g0, &g1).sqrt() / step_norm);
    }
    let safe = LIPSCHITZ_SAFETY * l_hat;
    let rhs = 2.0 * eps_ae + 2.0 * safe * safe * delta;
    Ok(FidelityReport {
        eps_ae,
        delta_shift: delta,
        l_hat,
        lhs,
        rhs,
        safety: LIPSCHITZ_SAFETY,
        n_samples: samples.len(),
        n_probes,
        pass: lhs <= rhs,
        statistical: true,
    })
}

/// `G(z) = W vec(z)`: a decoder whose Lipschitz constant is known exactly.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    pub w: Vec<Vec<f64>>,
}

impl LinearDecoder {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.w.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// Largest singular value and its unit right singular vector, by power
    /// iteration on `W^T W`.
    pub fn operator_norm(&self) -> (f64, Vec<f64>) {
        let n = self.w[0].len();
        let mut v = vec![1.0; n];
        for _ in 0..2000 {
            let wv = self.apply(&v);
            let mut u = vec![0.0; n];
            for (r, s) in self.w.iter().zip(&wv) {
                for (ui, a) in u.iter_mut().zip(r) {
                    *ui += a * s;
                }
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = u.iter().map(|x| x / norm).collect();
        }
        let wv = self.apply(&v);
        (wv.iter().map(|x| x * x).sum::<f64>().sqrt(), v)
    }
}

impl LatentDecoder for LinearDecoder {
    fn decode(&self, z: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok(self.apply(z.data()))
    }
}

/// The codec decoder evaluated in 64-bit mode.
pub struct CodecDecoder<'a> {
    pub tok: &'a Tokenizer,
}

impl LatentDecoder for CodecDecoder<'_> {
    fn decode(&self, z: &Tensor<f64>) -> Result<Vec<f64>> {
        let s: Session<f64> = Session::eval(&self.tok.gen);
        let &[t, d] = z.shape() else {
            return Err(Error::shape("fidelity", format!("latent must be [T, d], got {:?}", z.shape())));
        };
        let z = Var::constant(z.clone().reshape(vec![1, t, d])?);
        Ok(self.tok.codec.decode(&s, &z)?.value().data().to_vec())
    }
}

/// Encodes each utterance with the deterministic encoder (`z_AE`) and draws
/// `z_VAE = μ + noise_scale · σ · ε` from the posterior of `vae`.
pub fn codec_samples(vae: &Tokenizer, corpus: &[Utterance], noise_scale: f64, seed: u64) -> Result<Vec<FidelitySample>> {
    let s: Session<f64> = Session::eval(&vae.gen);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|u| {
            let x = Var::constant(Tensor::new(vec![1, u.samples.len()], u.samples.clone())?);
            let z_ae = vae.codec.encode(&s, &x)?;
            let p = posterior(&s, &vae.codec.cfg, &z_ae)?;
            let eps: Tensor<f64> = standard_normal(z_ae.shape(), &mut rng);
            let z_vae: Vec<f64> = p
                .mu
                .value()
                .data()
                .iter()
                .zip(p.log_sigma.value().data())
                .zip(eps.data())
                .map(|((m, ls), e)| m + noise_scale * ls.exp() * e)
                .collect();
            let (t, d) = (z_ae.shape()[1], z_ae.shape()[2]);
            Ok(FidelitySample {
                x: u.samples.clone(),
                z_ae: Tensor::new(vec![t, d], z_ae.value().data().to_vec())?,
                z_vae: Tensor::new(vec![t, d], z_vae)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_setup(seed: u64, shift_scale: f64) -> (LinearDecoder, Vec<FidelitySample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, d, len) = (3, 2, 10);
        let w = (0..len).map(|_| (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let dec = LinearDecoder { w };
        let samples = (0..20)
            .map(|_| {
                let z_ae: Tensor<f64> = standard_normal(&[t, d], &mut rng);
                let noise: Tensor<f64> = standard_normal(&[t, d], &mut rng);
                let z_vae = Tensor::new(vec![t, d], z_ae.data().iter().zip(noise.data()).map(|(a, e)| a + shift_scale * e).collect()).unwrap();
                let clean = dec.decode(&z_ae).unwrap();
                let x = clean.iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
                FidelitySample { x, z_ae, z_vae }
            })
            .collect();
        (dec, samples)
    }

    #[test]
    fn linear_decoder_oracle() {
        let (dec, samples) = linear_setup(3, 0.3);
        let r = fidelity_bound_report(&dec, &samples, 64, 0).unwrap();
        let direct: f64 = samples
            .iter()
            .map(|s| dec.decode(&s.z_vae).unwrap().iter().zip(&s.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / samples.len() as f64;
        assert!((r.lhs - direct).abs() < 1e-12);
        let (op, _) = dec.operator_norm();
        // a probed gain never exceeds the operator norm of a linear map
        assert!(r.l_hat <= op * (1.0 + 1e-9), "{} > {op}", r.l_hat);
        assert!(r.lhs <= r.rhs_with(op));
        assert!(r.pass);
    }

    #[test]
    fn zero_shift_is_degenerate() {
        let (dec, mut samples) = linear_setup(4, 0.0);
        for s in &mut samples {
            s.z_vae = s.z_ae.clone();
        }
        let r = fidelity_bound_report(&dec, &samples, 8, 0).unwrap();
        assert_eq!(r.delta_shift, 0.0);
        assert_eq!(r.lhs, r.eps_ae);
        assert!(r.lhs <= 2.0 * r.eps_ae);
        assert!(fidelity_bound_report(&dec, &[], 8, 0).is_err());
    }
}
