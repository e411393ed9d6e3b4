//! Perturbation probes that measure how far each part of the codec reads
//! into the future.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bottleneck::{self, standard_normal};
use super::model::{Codec, ConvRole};
use crate::error::Result;
use crate::numerics::{ParameterSet, Real, Session, Tensor, Var};

const BUMP: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    /// Input length in samples for the end-to-end probes.
    pub n_samples: usize,
    /// Perturbation positions per end-to-end probe; `None` tries every one.
    pub probes: Option<usize>,
    /// Perturbed copies evaluated per forward pass.
    pub batch: usize,
    pub seed: u64,
}

impl ProbeOptions {
    /// Exhaustive probe over 16 latent frames.
    pub fn exhaustive(codec: &Codec) -> Self {
        Self { n_samples: 16 * codec.hop(), probes: None, batch: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerProbe {
    pub name: String,
    pub expected_reach: i64,
    pub measured_reach: i64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub expected_lookahead: usize,
    pub encoder_lookahead: i64,
    pub decoder_lookahead: i64,
    pub encoder_probes: usize,
    pub decoder_probes: usize,
    pub layers: Vec<LayerProbe>,
    /// Recurrent paths whose outputs moved before a perturbed frame.
    pub recurrent_leaks: Vec<String>,
    pub pass: bool,
}

impl ProbeReport {
    pub fn leaking_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.measured_reach != l.expected_reach)
            .map(|l| l.name.as_str())
            .collect()
    }
}

fn positions(total: usize, probes: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match probes {
        Some(n) if n < total => (0..n).map(|_| rng.random_range(0..total)).collect(),
        _ => (0..total).collect(),
    }
}

/// Index of the first entry along `axis_len`-long rows that differs.
fn first_change<T: Real>(base: &[T], moved: &[T], frame_len: usize) -> Option<usize> {
    base.iter()
        .zip(moved)
        .position(|(a, b)| a != b)
        .map(|i| i / frame_len)
}

/// Measures encoder and decoder lookahead end to end, the future reach of
/// every convolution in the layer table, and causality of the recurrent
/// paths. Passes iff both lookaheads equal the configured value and every
/// other layer is causal.
pub fn causality_probe<T: Real>(codec: &Codec, params: &ParameterSet, opts: &ProbeOptions) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = params.clone();
    params.randomize_zero_weights(0.1, &mut rng)?;
    let params = &params;
    let s: Session<T> = Session::eval(params);
    let cfg = &codec.cfg;
    let hop = codec.hop();
    let d = cfg.latent_dim;
    let n_frames = cfg.n_frames(opts.n_samples);
    let len = n_frames * hop;

    // encoder: perturb one sample, find the earliest latent frame that moves
    let x: Vec<T> = standard_normal::<T>(&[len], &mut rng).data().iter().map(|&v| v * T::from_f64(0.3)).collect();
    let base = codec.encode(&s, &Var::constant(Tensor::new(vec![1, len], x.clone())?))?;
    let frame = n_frames * d;
    let mut encoder_lookahead = i64::MIN;
    let enc_pos = positions(len, opts.probes, &mut rng);
    for chunk in enc_pos.chunks(opts.batch.max(1)) {
        let mut batch = Vec::with_capacity(chunk.len() * len);
        for &n in chunk {
            let mut xi = x.clone();
            xi[n] += T::from_f64(BUMP);
            batch.extend(xi);
        }
        let z = codec.encode(&s, &Var::constant(Tensor::new(vec![chunk.len(), len], batch)?))?;
        for (b, &n) in chunk.iter().enumerate() {
            let moved = &z.data()[b * frame..(b + 1) * frame];
            if let Some(f) = first_change(base.data(), moved, d) {
                encoder_lookahead = encoder_lookahead.max((n / hop) as i64 - f as i64);
            }
        }
    }

    // decoder: perturb one latent frame, find the earliest sample that moves
    let z0 = standard_normal::<T>(&[1, n_frames, d], &mut rng);
    let y0 = codec.decode(&s, &Var::constant(z0.clone()))?;
    let mut decoder_lookahead = i64::MIN;
    let dec_pos = positions(n_frames, opts.probes, &mut rng);
    for chunk in dec_pos.chunks(opts.batch.max(1)) {
        let mut batch = Vec::with_capacity(chunk.len() * frame);
        for &t in chunk {
            let mut zi = z0.data().to_vec();
            for v in &mut zi[t * d..(t + 1) * d] {
                *v += T::from_f64(BUMP);
            }
            batch.extend(zi);
        }
        let y = codec.decode(&s, &Var::constant(Tensor::new(vec![chunk.len(), n_frames, d], batch)?))?;
        for (b, &t) in chunk.iter().enumerate() {
            if let Some(n) = first_change(y0.data(), &y.data()[b * len..(b + 1) * len], 1) {
                decoder_lookahead = decoder_lookahead.max(t as i64 - (n / hop) as i64);
            }
        }
    }

    let layers = probe_layers(codec, &mut rng)?;
    let recurrent_leaks = probe_recurrent(codec, &s, &mut rng)?;
    let expected = cfg.lookahead_frames as i64;
    let pass = encoder_lookahead == expected
        && decoder_lookahead == expected
        && layers.iter().all(|l| l.measured_reach == l.expected_reach)
        && recurrent_leaks.is_empty();
    Ok(ProbeReport {
        expected_lookahead: cfg.lookahead_frames,
        encoder_lookahead,
        decoder_lookahead,
        encoder_probes: enc_pos.len(),
        decoder_probes: dec_pos.len(),
        layers,
        recurrent_leaks,
        pass,
    })
}

/// Runs each table entry alone on a single channel with random taps and
/// measures how many input steps past its own position an output reads.
fn probe_layers(codec: &Codec, rng: &mut impl Rng) -> Result<Vec<LayerProbe>> {
    let mut out = Vec::new();
    for (name, l) in &codec.layers {
        let t_in = 8 * l.stride.max(1) + l.dilation * l.kernel + 4;
        let t_in = if l.role == ConvRole::Upsample { 12 } else { t_in };
        let taps: Vec<f64> = (0..l.kernel).map(|_| rng.random_range(0.5..1.5)).collect();
        let x: Tensor<f64> = standard_normal(&[1, t_in], rng);
        let run = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let xv = Var::constant(x.clone());
            let w = Var::constant(Tensor::new(vec![1, 1, l.kernel], taps.clone())?);
            let y = match l.role {
                ConvRole::Upsample => xv.conv_transpose1d(&w, None, l.stride, l.right_pad)?,
                _ => xv.conv1d(&w, None, l.spec())?,
            };
            Ok(y.value().clone())
        };
        let base = run(&x)?;
        let mut reach = i64::MIN;
        for i in 0..t_in {
            let mut xi = x.clone();
            xi.data_mut()[i] += BUMP;
            let y = run(&xi)?;
            if let Some(o) = first_change(base.data(), y.data(), 1) {
                // last input position an output at `o` is entitled to
                let own = match l.role {
                    ConvRole::Upsample => o / l.stride,
                    _ => o * l.stride + l.stride - 1,
                };
                reach = reach.max(i as i64 - own as i64);
            }
        }
        let expected_reach = match l.role {
            ConvRole::Lookahead => codec.cfg.lookahead_frames as i64,
            _ => 0,
        };
        out.push(LayerProbe { name: name.clone(), expected_reach, measured_reach: reach.max(0) });
    }
    Ok(out)
}

fn probe_recurrent<T: Real>(codec: &Codec, s: &Session<T>, rng: &mut impl Rng) -> Result<Vec<String>> {
    let cfg = &codec.cfg;
    let (steps, d) = (8, cfg.latent_dim);
    let z = standard_normal::<T>(&[1, steps, d], rng);
    let bump = |t: usize| {
        let mut zi = z.clone();
        zi.data_mut()[t * d..(t + 1) * d].iter_mut().for_each(|v| *v += T::from_f64(BUMP));
        Var::constant(zi)
    };
    let mut leaks = Vec::new();
    let post = |z: &Var<T>| -> Result<Vec<T>> {
        let p = bottleneck::posterior(s, cfg, z)?;
        Ok(p.mu.data().iter().chain(p.log_sigma.data()).copied().collect())
    };
    let pre = |z: &Var<T>| -> Result<Vec<T>> { Ok(bottleneck::recurrent(s, "decoder.pre", cfg, z)?.data().to_vec()) };
    let zc = Var::constant(z.clone());
    let (post0, pre0) = (post(&zc)?, pre(&zc)?);
    for t in 1..steps {
        let zt = bump(t);
        let (p, q) = (post(&zt)?, pre(&zt)?);
        // mu and log-sigma are stacked, so compare each half separately
        let half = steps * d;
        let early = t * d;
        if p[..early] != post0[..early] || p[half..half + early] != post0[half..half + early] {
            leaks.push(format!("bottleneck (frame {t})"));
        }
        if q[..early] != pre0[..early] {
            leaks.push(format!("decoder.pre (frame {t})"));
        }
    }
    Ok(leaks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_probe_passes_and_symmetric_patch_fails() {
        let mut codec = Codec::toy();
        let ps = codec.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let opts = ProbeOptions { n_samples: 8 * 64, probes: Some(96), batch: 32, seed: 2 };
        let r = causality_probe::<f64>(&codec, &ps, &opts).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!((r.encoder_lookahead, r.decoder_lookahead), (2, 2));

        let l = codec.layers.get_mut("encoder.block1.res1.conv1").unwrap();
        l.left_pad = l.dilation;
        l.right_pad = l.dilation;
        let r = causality_probe::<f64>(&codec, &ps, &opts).unwrap();
        assert!(!r.pass);
        assert_eq!(r.leaking_layers(), vec!["encoder.block1.res1.conv1"]);
    }
}
