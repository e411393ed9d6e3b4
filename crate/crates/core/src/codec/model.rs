//! Causal convolutional encoder and SnakeBeta/AMP decoder.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use super::bottleneck;
use super::config::CodecConfig;
use crate::error::{Error, Result};
use crate::numerics::nn;
use crate::numerics::{concat, Conv1dSpec, ParameterSet, Real, Session, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Role of a convolution in the causal structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConvRole {
    /// Left padding only.
    Causal,
    /// Reads future frames on purpose (the encoder and decoder lookahead).
    Lookahead,
    /// Transposed upsampling conv with right trimming.
    Upsample,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub left_pad: usize,
    pub right_pad: usize,
    pub role: ConvRole,
}

impl ConvLayer {
    fn causal(c_in: usize, c_out: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        // strided convs pad by kernel - stride so every output frame closes
        // exactly at the end of its input hop
        let left_pad = if stride > 1 { kernel - stride } else { dilation * (kernel - 1) };
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            dilation,
            left_pad,
            right_pad: 0,
            role: ConvRole::Causal,
        }
    }

    pub fn spec(&self) -> Conv1dSpec {
        Conv1dSpec {
            stride: self.stride,
            dilation: self.dilation,
            left_pad: self.left_pad,
            right_pad: self.right_pad,
        }
    }

    /// Future input steps (at this layer's input rate) an output may read.
    pub fn future_reach(&self) -> usize {
        match self.role {
            ConvRole::Upsample => 0,
            _ => self.right_pad,
        }
    }
}

/// Codec architecture: configuration plus the table of every convolution.
///
/// The table is authoritative for padding, so tests can patch one entry to
/// confirm the causality probe notices.
#[derive(Debug, Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub layers: BTreeMap<String, ConvLayer>,
}

fn stage_stride(cfg: &CodecConfig, j: usize) -> (usize, usize) {
    // decoder stage j undoes encoder block n-1-j
    let i = cfg.strides.len() - 1 - j;
    (i, cfg.strides[i])
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = BTreeMap::new();
        let n = cfg.strides.len();
        let dz = cfg.latent_dim;
        layers.insert("encoder.conv_in".to_string(), ConvLayer::causal(1, cfg.channels(0), 7, 1, 1));
        for i in 0..n {
            let c = cfg.channels(i);
            for j in 0..cfg.residual_layers {
                layers.insert(format!("encoder.block{i}.res{j}.conv1"), ConvLayer::causal(c, c, 3, 1, 1 << j));
                layers.insert(format!("encoder.block{i}.res{j}.conv2"), ConvLayer::causal(c, c, 1, 1, 1));
            }
            layers.insert(
                format!("encoder.block{i}.down"),
                ConvLayer::causal(c, cfg.channels(i + 1), cfg.kernels[i], cfg.strides[i], 1),
            );
        }
        layers.insert("encoder.proj".to_string(), ConvLayer::causal(cfg.top_channels(), dz, 3, 1, 1));
        let look = |c_in, c_out| ConvLayer {
            c_in,
            c_out,
            kernel: cfg.lookahead_frames + 1,
            stride: 1,
            dilation: 1,
            left_pad: 0,
            right_pad: cfg.lookahead_frames,
            role: ConvRole::Lookahead,
        };
        layers.insert("encoder.lookahead".to_string(), look(dz, dz));
        layers.insert("decoder.lookahead".to_string(), look(dz, cfg.top_channels()));
        for j in 0..n {
            let (i, s) = stage_stride(&cfg, j);
            let (c_in, c_out) = (cfg.channels(i + 1), cfg.channels(i));
            layers.insert(
                format!("decoder.up{j}.conv"),
                ConvLayer {
                    c_in,
                    c_out,
                    kernel: 2 * s,
                    stride: s,
                    dilation: 1,
                    left_pad: 0,
                    right_pad: s,
                    role: ConvRole::Upsample,
                },
            );
            for (m, &k) in cfg.amp_kernels.iter().enumerate() {
                for (r, &d) in cfg.amp_dilations.iter().enumerate() {
                    let p = format!("decoder.up{j}.amp{m}.res{r}");
                    layers.insert(format!("{p}.conv1"), ConvLayer::causal(c_out, c_out, k, 1, d));
                    layers.insert(format!("{p}.conv2"), ConvLayer::causal(c_out, c_out, k, 1, 1));
                }
            }
        }
        layers.insert("decoder.conv_out".to_string(), ConvLayer::causal(cfg.channels(0), 1, 7, 1, 1));
        Ok(Self { cfg, layers })
    }

    pub fn toy() -> Self {
        Self::new(CodecConfig::toy()).expect("toy preset is valid")
    }

    pub fn paper() -> Self {
        Self::new(CodecConfig::paper()).expect("paper preset is valid")
    }

    pub fn hop(&self) -> usize {
        self.cfg.hop()
    }

    fn layer(&self, name: &str) -> Result<&ConvLayer> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Registers every encoder, bottleneck and decoder tensor.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for (name, l) in &self.layers {
            match l.role {
                ConvRole::Upsample => {
                    let std = 1.0 / ((l.c_in * l.kernel / l.stride) as f64).sqrt();
                    ps.init_normal(format!("{name}.weight"), &[l.c_in, l.c_out, l.kernel], std, rng)?;
                    ps.init_const(format!("{name}.bias"), &[l.c_out], 0.0)?;
                }
                _ => {
                    nn::init_conv(&mut ps, name, l.c_out, l.c_in, l.kernel, rng)?;
                    // residual branches start small so deep stacks stay near identity
                    if name.ends_with(".conv2") {
                        ps.get_mut(&format!("{name}.weight"))?.data_mut().iter_mut().for_each(|w| *w *= 0.1);
                    }
                }
            }
        }
        for j in 0..self.cfg.strides.len() {
            let (i, _) = stage_stride(&self.cfg, j);
            let c = self.cfg.channels(i);
            for m in 0..self.cfg.amp_kernels.len() {
                for r in 0..self.cfg.amp_dilations.len() {
                    for sn in ["snake1", "snake2"] {
                        init_snake(&mut ps, &format!("decoder.up{j}.amp{m}.res{r}.{sn}"), c)?;
                    }
                }
            }
        }
        init_snake(&mut ps, "decoder.post", self.cfg.channels(0))?;
        bottleneck::init_recurrent(&mut ps, "decoder.pre", &self.cfg, false, rng)?;
        bottleneck::init_posterior(&mut ps, &self.cfg, rng)?;
        bottleneck::init_flow(&mut ps, &self.cfg, rng)?;
        Ok(ps)
    }

    fn conv<T: Real>(&self, s: &Session<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
        let l = self.layer(name)?;
        match l.role {
            ConvRole::Upsample => x.conv_transpose1d(
                &s.p(&format!("{name}.weight"))?,
                Some(&s.p(&format!("{name}.bias"))?),
                l.stride,
                l.right_pad,
            ),
            _ => nn::conv(s, name, x, l.spec()),
        }
    }

    /// Right zero-pads `[B, L]` to a multiple of the hop.
    pub fn pad_to_hop<T: Real>(&self, x: &Var<T>) -> Result<Var<T>> {
        let &[b, len] = x.shape() else {
            return Err(Error::shape("encode", format!("waveform batch must be [B, L], got {:?}", x.shape())));
        };
        if len == 0 {
            return Err(Error::invalid("empty waveform"));
        }
        let target = self.cfg.n_frames(len) * self.hop();
        if target == len {
            return Ok(x.clone());
        }
        concat(&[x.clone(), Var::constant(Tensor::zeros(vec![b, target - len]))], 1)
    }

    /// `[B, L]` waveforms to `[B, T_z, d_z]` latents.
    pub fn encode<T: Real>(&self, s: &Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let x = self.pad_to_hop(x)?;
        let (b, len) = (x.shape()[0], x.shape()[1]);
        let mut h = self.conv(s, "encoder.conv_in", &x.reshape(&[b, 1, len])?)?;
        for i in 0..self.cfg.strides.len() {
            for j in 0..self.cfg.residual_layers {
                let p = format!("encoder.block{i}.res{j}");
                let r = self.conv(s, &format!("{p}.conv1"), &h.leaky_relu(LEAKY_SLOPE)?)?;
                let r = self.conv(s, &format!("{p}.conv2"), &r.leaky_relu(LEAKY_SLOPE)?)?;
                h = h.add(&r)?;
            }
            h = self.conv(s, &format!("encoder.block{i}.down"), &h.leaky_relu(LEAKY_SLOPE)?)?;
        }
        let h = self.conv(s, "encoder.proj", &h.leaky_relu(LEAKY_SLOPE)?)?;
        let z = self.conv(s, "encoder.lookahead", &h.leaky_relu(LEAKY_SLOPE)?)?;
        z.transpose(1, 2)
    }

    /// `[B, T_z, d_z]` latents to `[B, T_z * hop]` waveforms.
    pub fn decode<T: Real>(&self, s: &Session<T>, z: &Var<T>) -> Result<Var<T>> {
        let &[b, _, dz] = z.shape() else {
            return Err(Error::shape("decode", format!("latents must be [B, T, d], got {:?}", z.shape())));
        };
        if dz != self.cfg.latent_dim {
            return Err(Error::shape("decode", format!("latent dim {dz}, codec expects {}", self.cfg.latent_dim)));
        }
        let u = z.add(&bottleneck::recurrent(s, "decoder.pre", &self.cfg, z)?)?;
        let mut h = self.conv(s, "decoder.lookahead", &u.transpose(1, 2)?)?;
        for j in 0..self.cfg.strides.len() {
            h = self.conv(s, &format!("decoder.up{j}.conv"), &h.leaky_relu(LEAKY_SLOPE)?)?;
            h = self.amp_block(s, &format!("decoder.up{j}"), &h)?;
        }
        let h = snake(s, "decoder.post", &h)?;
        let y = self.conv(s, "decoder.conv_out", &h)?.tanh()?;
        let len = y.shape()[2];
        y.reshape(&[b, len])
    }

    /// Parallel residual branches (one per kernel size) averaged.
    fn amp_block<T: Real>(&self, s: &Session<T>, prefix: &str, h: &Var<T>) -> Result<Var<T>> {
        let mut acc: Option<Var<T>> = None;
        for m in 0..self.cfg.amp_kernels.len() {
            let mut x = h.clone();
            for r in 0..self.cfg.amp_dilations.len() {
                let p = format!("{prefix}.amp{m}.res{r}");
                let y = snake(s, &format!("{p}.snake1"), &x)?;
                let y = self.conv(s, &format!("{p}.conv1"), &y)?;
                let y = snake(s, &format!("{p}.snake2"), &y)?;
                let y = self.conv(s, &format!("{p}.conv2"), &y)?;
                x = x.add(&y)?;
            }
            acc = Some(match acc {
                Some(a) => a.add(&x)?,
                None => x,
            });
        }
        acc.unwrap().scale(1.0 / self.cfg.amp_kernels.len() as f64)
    }
}

fn init_snake(ps: &mut ParameterSet, prefix: &str, channels: usize) -> Result<()> {
    ps.init_const(format!("{prefix}.log_alpha"), &[channels], 0.0)?;
    ps.init_const(format!("{prefix}.log_beta"), &[channels], 0.0)
}

fn snake<T: Real>(s: &Session<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    x.snake_beta(&s.p(&format!("{prefix}.log_alpha"))?, &s.p(&format!("{prefix}.log_beta"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_shapes() {
        let codec = Codec::toy();
        let ps = codec.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s: Session<f32> = Session::eval(&ps);
        let x = Var::constant(Tensor::new(vec![1, 8000], (0..8000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect()).unwrap());
        let z = codec.encode(&s, &x).unwrap();
        assert_eq!(z.shape(), &[1, 125, 8]);
        let y = codec.decode(&s, &z).unwrap();
        assert_eq!(y.shape(), &[1, 8000]);
    }

    #[test]
    fn zero_latents_decode_to_silence() {
        let codec = Codec::toy();
        let ps = codec.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s: Session<f64> = Session::eval(&ps);
        let y = codec.decode(&s, &Var::constant(Tensor::zeros(vec![1, 5, 8]))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_contract_for_odd_lengths() {
        let codec = Codec::toy();
        let ps = codec.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s: Session<f32> = Session::eval(&ps);
        for len in [1usize, 63, 64, 65, 200] {
            let x = Var::constant(Tensor::filled(vec![1, len], 0.1f32));
            let y = codec.decode(&s, &codec.encode(&s, &x).unwrap()).unwrap();
            assert_eq!(y.shape()[1], len.div_ceil(64) * 64);
        }
    }
}
