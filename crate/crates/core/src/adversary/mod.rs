//! Multi-period discriminator bank with least-squares adversarial and
//! feature-matching losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn;
use crate::numerics::{concat, Conv1dSpec, ParameterSet, Real, Session, Tensor, Var};

const SLOPE: f64 = 0.1;
const KERNEL: usize = 5;
const STRIDE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub periods: Vec<usize>,
    /// Output channels of the strided layers; one more stride-1 layer keeps
    /// the last width before the score conv.
    pub channels: Vec<usize>,
}

impl DiscConfig {
    pub fn toy() -> Self {
        Self { periods: vec![2, 3], channels: vec![16, 32, 64] }
    }

    pub fn paper() -> Self {
        Self { periods: vec![2, 3, 5, 7, 11], channels: vec![32, 128, 512, 1024] }
    }
}

/// Scores and tapped activations of every sub-discriminator.
pub struct DiscOutput<T: Real> {
    pub scores: Vec<Var<T>>,
    pub features: Vec<Vec<Var<T>>>,
}

pub struct Discriminator {
    pub cfg: DiscConfig,
}

impl Discriminator {
    pub fn new(cfg: DiscConfig) -> Self {
        Self { cfg }
    }

    pub fn prefix(p: usize) -> String {
        format!("disc.p{p}")
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for &p in &self.cfg.periods {
            let pre = Self::prefix(p);
            let mut c_in = 1;
            for (i, &c) in self.cfg.channels.iter().enumerate() {
                nn::init_conv(&mut ps, &format!("{pre}.conv{i}"), c, c_in, KERNEL, rng)?;
                c_in = c;
            }
            let n = self.cfg.channels.len();
            nn::init_conv(&mut ps, &format!("{pre}.conv{n}"), c_in, c_in, KERNEL, rng)?;
            nn::init_conv(&mut ps, &format!("{pre}.post"), 1, c_in, 3, rng)?;
        }
        Ok(ps)
    }

    /// `w: [B, L]`. Each sub-discriminator folds the waveform into `period`
    /// interleaved columns and convolves each column along time with shared
    /// weights.
    pub fn forward<T: Real>(&self, s: &Session<T>, w: &Var<T>) -> Result<DiscOutput<T>> {
        let &[b, len] = w.shape() else {
            return Err(Error::shape("disc_forward", format!("waveform batch must be [B, L], got {:?}", w.shape())));
        };
        if len == 0 {
            return Err(Error::invalid("empty waveform"));
        }
        let mut scores = Vec::new();
        let mut features = Vec::new();
        for &p in &self.cfg.periods {
            let padded = len.div_ceil(p) * p;
            let x = if padded > len {
                concat(&[w.clone(), Var::constant(Tensor::zeros(vec![b, padded - len]))], 1)?
            } else {
                w.clone()
            };
            let frames = padded / p;
            let mut h = x.reshape(&[b, frames, p])?.transpose(1, 2)?.reshape(&[b * p, 1, frames])?;
            let pre = Self::prefix(p);
            let mut taps = Vec::new();
            let n = self.cfg.channels.len();
            for i in 0..=n {
                let stride = if i < n { STRIDE } else { 1 };
                let spec = Conv1dSpec::symmetric(KERNEL, stride, 1);
                h = nn::conv(s, &format!("{pre}.conv{i}"), &h, spec)?.leaky_relu(SLOPE)?;
                taps.push(h.clone());
            }
            let score = nn::conv(s, &format!("{pre}.post"), &h, Conv1dSpec::symmetric(3, 1, 1))?;
            taps.push(score.clone());
            scores.push(score);
            features.push(taps);
        }
        Ok(DiscOutput { scores, features })
    }
}

/// Least-squares objectives, averaged over sub-discriminators:
/// `L_G = mean((fake - 1)^2)`, `L_D = mean((real - 1)^2) + mean(fake^2)`.
pub fn gan_losses<T: Real>(real: &[Var<T>], fake: &[Var<T>]) -> Result<(Var<T>, Var<T>)> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape("gan_losses", format!("{} real vs {} fake score maps", real.len(), fake.len())));
    }
    let k = 1.0 / real.len() as f64;
    let mut lg: Option<Var<T>> = None;
    let mut ld: Option<Var<T>> = None;
    for (r, f) in real.iter().zip(fake) {
        if r.shape() != f.shape() {
            return Err(Error::shape("gan_losses", format!("{:?} vs {:?}", r.shape(), f.shape())));
        }
        let g = f.add_scalar(-1.0)?.square()?.mean()?;
        let d = r.add_scalar(-1.0)?.square()?.mean()?.add(&f.square()?.mean()?)?;
        lg = Some(match lg {
            Some(a) => a.add(&g)?,
            None => g,
        });
        ld = Some(match ld {
            Some(a) => a.add(&d)?,
            None => d,
        });
    }
    Ok((lg.unwrap().scale(k)?, ld.unwrap().scale(k)?))
}

/// Mean absolute difference between matched feature maps, averaged over
/// layers and sub-discriminators. Real features are detached.
pub fn feature_matching_loss<T: Real>(real: &[Vec<Var<T>>], fake: &[Vec<Var<T>>]) -> Result<Var<T>> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape("feature_matching", "sub-discriminator count differs".to_string()));
    }
    let mut total: Option<Var<T>> = None;
    for (rs, fs) in real.iter().zip(fake) {
        if rs.len() != fs.len() || rs.is_empty() {
            return Err(Error::shape("feature_matching", "layer count differs".to_string()));
        }
        let mut per: Option<Var<T>> = None;
        for (r, f) in rs.iter().zip(fs) {
            if r.shape() != f.shape() {
                return Err(Error::shape("feature_matching", format!("{:?} vs {:?}", r.shape(), f.shape())));
            }
            let l = f.sub(&r.detach())?.abs()?.mean()?;
            per = Some(match per {
                Some(a) => a.add(&l)?,
                None => l,
            });
        }
        let per = per.unwrap().scale(1.0 / rs.len() as f64)?;
        total = Some(match total {
            Some(a) => a.add(&per)?,
            None => per,
        });
    }
    total.unwrap().scale(1.0 / real.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled(shape: &[usize], v: f64) -> Var<f64> {
        Var::constant(Tensor::filled(shape.to_vec(), v))
    }

    #[test]
    fn toy_bank_structure_and_zero_input() {
        let d = Discriminator::new(DiscConfig::toy());
        let ps = d.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s: Session<f32> = Session::eval(&ps);
        let out = d.forward(&s, &Var::constant(Tensor::zeros(vec![1, 8000]))).unwrap();
        assert_eq!(out.scores.len(), 2);
        assert!(out.features.iter().all(|f| f.len() >= 3));
        assert!(out.scores.iter().all(|sc| sc.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn lsgan_reference_cases() {
        let (g, d) = gan_losses(&[filled(&[3], 1.0)], &[filled(&[3], 0.0)]).unwrap();
        assert_eq!((g.item(), d.item()), (1.0, 0.0));
        let (g, _) = gan_losses(&[filled(&[3], 0.2)], &[filled(&[3], 1.0)]).unwrap();
        assert_eq!(g.item(), 0.0);
        assert!(gan_losses(&[filled(&[3], 1.0)], &[]).is_err());
    }

    #[test]
    fn feature_matching_hand_case() {
        let r = vec![vec![
            Var::constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
            Var::constant(Tensor::new(vec![1], vec![0.5]).unwrap()),
        ]];
        let f = vec![vec![
            Var::constant(Tensor::new(vec![2], vec![1.5, 1.0]).unwrap()),
            Var::constant(Tensor::new(vec![1], vec![-0.5]).unwrap()),
        ]];
        // layer means 0.75 and 1.0
        let l: f64 = feature_matching_loss(&r, &f).unwrap().item();
        assert!((l - 0.875).abs() < 1e-12);
        assert_eq!(feature_matching_loss(&r, &r).unwrap().item(), 0.0);
    }
}
