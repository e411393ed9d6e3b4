//! Differentiable STFT magnitudes, HTK mel filterbanks and the multi-scale
//! log-mel L1 loss.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};

/// Floor applied before log compression.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!(
                "mel scale needs 0 < hop <= fft_size, got hop {} fft {}",
                self.hop, self.fft_size
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel band [{}, {}] Hz invalid at {} Hz",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Shortest signal the reflection padding accepts.
    pub fn min_len(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Three resolutions at 8 kHz.
pub fn toy_scales() -> Vec<MelConfig> {
    [(64, 16, 20), (128, 32, 20), (256, 64, 40)]
        .into_iter()
        .map(|(fft_size, hop, n_mels)| MelConfig {
            fft_size,
            hop,
            n_mels,
            f_min: 0.0,
            f_max: 4000.0,
            sample_rate: 8000,
        })
        .collect()
}

/// Three resolutions at 48 kHz.
pub fn paper_scales() -> Vec<MelConfig> {
    [(1024, 256, 80), (2048, 512, 128), (4096, 1024, 128)]
        .into_iter()
        .map(|(fft_size, hop, n_mels)| MelConfig {
            fft_size,
            hop,
            n_mels,
            f_min: 0.0,
            f_max: 24000.0,
            sample_rate: 48000,
        })
        .collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK filterbank, `[n_freqs, n_mels]` (column per filter).
pub fn mel_filterbank(cfg: &MelConfig) -> Tensor<f64> {
    let nf = cfg.n_freqs();
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; nf * cfg.n_mels];
    for k in 0..nf {
        let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[k * cfg.n_mels + m] = w;
        }
    }
    Tensor::new(vec![nf, cfg.n_mels], fb).expect("filterbank shape")
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|j| 0.5 - 0.5 * (2.0 * PI * j as f64 / n as f64).cos()).collect()
}

/// Windowed real-DFT matrices `[fft, n_freqs]` for the real and imaginary
/// parts.
fn dft_matrices(fft: usize) -> (Tensor<f64>, Tensor<f64>) {
    let nf = fft / 2 + 1;
    let w = hann(fft);
    let mut re = vec![0.0; fft * nf];
    let mut im = vec![0.0; fft * nf];
    for j in 0..fft {
        for k in 0..nf {
            let ph = 2.0 * PI * ((j * k) % fft) as f64 / fft as f64;
            re[j * nf + k] = w[j] * ph.cos();
            im[j * nf + k] = -w[j] * ph.sin();
        }
    }
    (
        Tensor::new(vec![fft, nf], re).unwrap(),
        Tensor::new(vec![fft, nf], im).unwrap(),
    )
}

/// Flat gather indices framing `[B, L]` into `[B, frames, fft]` after
/// reflection padding of `fft / 2` on both sides.
fn frame_indices(batch: usize, len: usize, cfg: &MelConfig) -> Vec<usize> {
    let half = (cfg.fft_size / 2) as isize;
    let frames = cfg.n_frames(len);
    let last = len as isize - 1;
    let mut idx = Vec::with_capacity(batch * frames * cfg.fft_size);
    for b in 0..batch {
        for f in 0..frames {
            for j in 0..cfg.fft_size {
                let mut i = (f * cfg.hop + j) as isize - half;
                if i < 0 {
                    i = -i;
                }
                if i > last {
                    i = 2 * last - i;
                }
                idx.push(b * len + i as usize);
            }
        }
    }
    idx
}

fn batch_len<T: Real>(w: &Var<T>) -> Result<(usize, usize)> {
    match *w.shape() {
        [l] => Ok((1, l)),
        [b, l] => Ok((b, l)),
        _ => Err(Error::shape("stft", format!("waveform must be [L] or [B,L], got {:?}", w.shape()))),
    }
}

/// Time-major magnitudes `[B, frames, n_freqs]`.
pub(crate) fn stft_frames<T: Real>(w: &Var<T>, cfg: &MelConfig) -> Result<Var<T>> {
    cfg.validate()?;
    let (batch, len) = batch_len(w)?;
    if len < cfg.min_len() {
        return Err(Error::shape(
            "stft",
            format!("waveform of {len} samples shorter than {} needed for fft {}", cfg.min_len(), cfg.fft_size),
        ));
    }
    let frames = cfg.n_frames(len);
    let idx = Rc::new(frame_indices(batch, len, cfg));
    let framed = w.gather(idx, &[batch, frames, cfg.fft_size])?;
    let (re_m, im_m) = dft_matrices(cfg.fft_size);
    let re = framed.matmul(&Var::constant(Tensor::from_f64(&re_m)))?;
    let im = framed.matmul(&Var::constant(Tensor::from_f64(&im_m)))?;
    re.magnitude(&im)
}

/// STFT magnitudes, `[n_freqs, frames]` for `[L]` input or
/// `[B, n_freqs, frames]` for `[B, L]`.
pub fn stft_magnitude<T: Real>(w: &Var<T>, cfg: &MelConfig) -> Result<Var<T>> {
    let batched = w.shape().len() == 2;
    let m = stft_frames(w, cfg)?.transpose(1, 2)?;
    if batched {
        Ok(m)
    } else {
        let s = m.shape().to_vec();
        m.reshape(&s[1..])
    }
}

/// Projects magnitudes `[.., n_freqs, frames]` to `[.., n_mels, frames]`.
pub fn mel_project<T: Real>(mag: &Var<T>, cfg: &MelConfig) -> Result<Var<T>> {
    let rank = mag.shape().len();
    if rank < 2 || mag.shape()[rank - 2] != cfg.n_freqs() {
        return Err(Error::shape("mel_project", format!("{:?} for {} bins", mag.shape(), cfg.n_freqs())));
    }
    let fb = Var::constant(Tensor::from_f64(&mel_filterbank(cfg)));
    mag.transpose(rank - 2, rank - 1)?.matmul(&fb)?.transpose(rank - 2, rank - 1)
}

/// Log-mel features, time-major `[B, frames, n_mels]`.
pub fn log_mel<T: Real>(w: &Var<T>, cfg: &MelConfig) -> Result<Var<T>> {
    let fb = Var::constant(Tensor::from_f64(&mel_filterbank(cfg)));
    stft_frames(w, cfg)?.matmul(&fb)?.clamp_min(LOG_FLOOR)?.log()
}

/// Pads the shorter waveform with zeros at the end so both match.
fn match_lengths<T: Real>(x: &Var<T>, y: &Var<T>, max_gap: usize) -> Result<(Var<T>, Var<T>)> {
    let (bx, lx) = batch_len(x)?;
    let (by, ly) = batch_len(y)?;
    if bx != by {
        return Err(Error::shape("mel loss", format!("batch {bx} vs {by}")));
    }
    if lx.abs_diff(ly) > max_gap {
        return Err(Error::shape(
            "mel loss",
            format!("length mismatch {lx} vs {ly} exceeds one hop ({max_gap})"),
        ));
    }
    let pad = |v: &Var<T>, l: usize, target: usize| -> Result<Var<T>> {
        if l == target {
            return Ok(v.clone());
        }
        let z = Var::constant(Tensor::zeros(vec![bx, target - l]));
        crate::numerics::concat(&[v.reshape(&[bx, l])?, z], 1)
    };
    let target = lx.max(ly);
    Ok((pad(x, lx, target)?, pad(y, ly, target)?))
}

/// Mean over scales of the mean absolute log-mel difference. Accepts `[L]`
/// or `[B, L]` waveforms; the shorter one is zero-padded if the lengths
/// differ by at most the largest hop among `scales`.
pub fn multiscale_mel_loss<T: Real>(x: &Var<T>, x_hat: &Var<T>, scales: &[MelConfig]) -> Result<Var<T>> {
    if scales.is_empty() {
        return Err(Error::invalid("multiscale mel loss needs at least one scale"));
    }
    let max_hop = scales.iter().map(|s| s.hop).max().unwrap();
    let (x, x_hat) = match_lengths(x, x_hat, max_hop)?;
    let mut total: Option<Var<T>> = None;
    for cfg in scales {
        let a = log_mel(&x, cfg)?;
        let b = log_mel(&x_hat, cfg)?;
        let term = a.sub(&b)?.abs()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / scales.len() as f64)
}

/// Plain-number loss for evaluation.
pub fn mel_distance(x: &[f64], y: &[f64], scales: &[MelConfig]) -> Result<f64> {
    let vx = Var::constant(Tensor::new(vec![x.len()], x.to_vec())?);
    let vy = Var::constant(Tensor::new(vec![y.len()], y.to_vec())?);
    Ok(multiscale_mel_loss(&vx, &vy, scales)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MelConfig {
        toy_scales()[1]
    }

    #[test]
    fn frame_count_and_zero_input() {
        let w = Var::<f64>::constant(Tensor::zeros(vec![1000]));
        let m = stft_magnitude(&w, &cfg()).unwrap();
        assert_eq!(m.shape(), &[65, 1000 / 32 + 1]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_is_error() {
        let w = Var::<f64>::constant(Tensor::zeros(vec![64]));
        assert!(stft_magnitude(&w, &cfg()).is_err());
    }

    #[test]
    fn bin_centre_sine_concentrates_energy() {
        let c = cfg();
        let bin = 10;
        let f = bin as f64 * c.sample_rate as f64 / c.fft_size as f64;
        let x: Vec<f64> = (0..2000).map(|n| (2.0 * PI * f * n as f64 / c.sample_rate as f64).sin()).collect();
        let w = Var::constant(Tensor::new(vec![x.len()], x).unwrap());
        let m = stft_magnitude(&w, &c).unwrap();
        let frames = m.shape()[1];
        // interior frames only: edges see reflected signal
        let (mut at, mut total) = (0.0, 0.0);
        for k in 0..65 {
            for t in 4..frames - 4 {
                let e = m.data()[k * frames + t].powi(2);
                total += e;
                if k == bin {
                    at += e;
                }
            }
        }
        // a periodic Hann window puts weights 1/2 and 1/4 on the centre bin
        // and its two neighbours, so the centre holds (1/4) / (1/4 + 2/16)
        assert!((at / total - 2.0 / 3.0).abs() < 0.01, "{}", at / total);
        let mut lobe = 0.0;
        for k in bin - 1..=bin + 1 {
            for t in 4..frames - 4 {
                lobe += m.data()[k * frames + t].powi(2);
            }
        }
        assert!(lobe / total > 0.99);
    }

    #[test]
    fn filterbank_structure() {
        for c in toy_scales().iter().chain(paper_scales().iter()) {
            let fb = mel_filterbank(c);
            let (nf, nm) = (c.n_freqs(), c.n_mels);
            for m in 0..nm {
                let s: f64 = (0..nf).map(|k| fb.data()[k * nm + m]).sum();
                assert!(s > 0.0, "empty filter {m} for {c:?}");
            }
            for k in 0..nf {
                let nz: Vec<usize> = (0..nm).filter(|&m| fb.data()[k * nm + m] > 0.0).collect();
                assert!(nz.len() <= 2);
                if nz.len() == 2 {
                    assert_eq!(nz[1], nz[0] + 1);
                }
            }
        }
    }

    #[test]
    fn identical_signals_have_zero_loss() {
        let x: Vec<f64> = (0..1200).map(|n| (n as f64 * 0.1).sin() * 0.3).collect();
        assert_eq!(mel_distance(&x, &x, &toy_scales()).unwrap(), 0.0);
        let silence = vec![0.0; 1200];
        assert!(mel_distance(&x, &silence, &toy_scales()).unwrap() > 0.0);
    }

    #[test]
    fn length_mismatch_rules() {
        let x = vec![0.1; 1200];
        assert!(mel_distance(&x, &x[..1200 - 64], &toy_scales()).is_ok());
        assert!(mel_distance(&x, &x[..1200 - 65], &toy_scales()).is_err());
    }
}
