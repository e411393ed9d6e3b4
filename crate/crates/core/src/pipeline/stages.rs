//! The tokenizer bundle and the three progressive training stages.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, validate_against, LatentFile};
use super::config::{Ablation, LossWeights, Precision, TrainConfig};
use super::log::{LogRow, TrainingLog};
use super::optim::{adamw_step, OptimizerState};
use crate::adversary::{feature_matching_loss, gan_losses, DiscConfig, Discriminator};
use crate::codec::bottleneck::{kl_with_flow, posterior, sample_reparameterized, standard_normal};
use crate::codec::{Codec, CodecConfig};
use crate::dsp::corpus::{Task, Utterance};
use crate::dsp::mel::{multiscale_mel_loss, paper_scales, toy_scales, MelConfig};
use crate::enrich::supervision::{init_supervision, supervision_loss};
use crate::enrich::teachers::{distill_loss, init_heads, TeacherBundle};
use crate::enrich::EnrichConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Real, Session, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    I = 1,
    II = 2,
    III = 3,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::I),
            2 => Ok(Stage::II),
            3 => Ok(Stage::III),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        self as u32
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Loss components a stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum LossKind {
    Spec,
    Adv,
    Fm,
    Kl,
    Distill,
    Sup,
}

/// What a stage trains, what it freezes and which losses it uses.
#[derive(Debug, Clone, Serialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub steps: usize,
    pub frozen: Vec<String>,
    pub losses: Vec<LossKind>,
    pub beta: Option<f64>,
}

impl StagePlan {
    pub fn new(stage: Stage, steps: usize, weights: &LossWeights, ablation: &Ablation) -> Self {
        let mut losses = vec![LossKind::Spec, LossKind::Adv, LossKind::Fm];
        let (frozen, beta) = match stage {
            Stage::I => (vec![], None),
            Stage::II => (vec!["encoder".to_string(), "decoder".to_string()], Some(weights.beta_low)),
            Stage::III => (vec![], Some(weights.beta_high)),
        };
        if stage != Stage::I {
            losses.push(LossKind::Kl);
        }
        if stage == Stage::III {
            if ablation.distill {
                losses.push(LossKind::Distill);
            }
            if ablation.supervise {
                losses.push(LossKind::Sup);
            }
        }
        Self { stage, steps, frozen, losses, beta }
    }

    pub fn uses(&self, k: LossKind) -> bool {
        self.losses.contains(&k)
    }
}

/// Every trainable and frozen piece of the tokenizer.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub codec: Codec,
    pub disc: DiscConfig,
    pub enrich: EnrichConfig,
    pub teachers: TeacherBundle,
    /// Encoder, bottleneck, decoder, student heads and supervision net.
    pub gen: ParameterSet,
    pub disc_params: ParameterSet,
    /// Last completed stage (0 for a fresh model).
    pub stage: u32,
    pub step: u64,
}

pub fn preset_parts(preset: &str) -> Result<(CodecConfig, DiscConfig)> {
    let cfg = CodecConfig::preset(preset)?;
    let disc = if preset == "paper" { DiscConfig::paper() } else { DiscConfig::toy() };
    Ok((cfg, disc))
}

pub fn mel_scales(cfg: &CodecConfig) -> Vec<MelConfig> {
    if cfg.sample_rate == 8000 {
        toy_scales()
    } else {
        paper_scales()
    }
}

impl Tokenizer {
    pub fn new(preset: &str, enrich: EnrichConfig, seed: u64) -> Result<Self> {
        let (cfg, disc) = preset_parts(preset)?;
        let codec = Codec::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = codec.init_params(&mut rng)?;
        init_heads(&mut gen, &enrich, codec.cfg.latent_dim, &mut rng)?;
        init_supervision(&mut gen, &enrich, codec.cfg.latent_dim, &mut rng)?;
        let disc_params = Discriminator::new(disc.clone()).init_params(&mut rng)?;
        let teachers = TeacherBundle::new(enrich.clone())?;
        Ok(Self { codec, disc, enrich, teachers, gen, disc_params, stage: 0, step: 0 })
    }

    pub fn discriminator(&self) -> Discriminator {
        Discriminator::new(self.disc.clone())
    }

    pub fn hop(&self) -> usize {
        self.codec.hop()
    }

    /// Name of the preset the codec was built from.
    pub fn preset_name(&self) -> &'static str {
        ["toy", "paper"].into_iter().find(|p| CodecConfig::preset(p).is_ok_and(|c| c == self.codec.cfg)).unwrap_or("custom")
    }

    pub fn mel_scales(&self) -> Vec<MelConfig> {
        mel_scales(&self.codec.cfg)
    }

    /// Generator, discriminator and the `meta.*` scalars (stage, step,
    /// sample rate, causal supervision encoder) in one set.
    pub fn to_checkpoint(&self) -> Result<ParameterSet> {
        let mut ps = self.gen.clone();
        ps.unfreeze_all();
        ps.extend(self.disc_params.clone())?;
        let scalar = |v: f64| Tensor::new(vec![1], vec![v]);
        ps.insert("meta.stage", scalar(self.stage as f64)?)?;
        ps.insert("meta.step", scalar(self.step as f64)?)?;
        ps.insert("meta.sample_rate", scalar(self.codec.cfg.sample_rate as f64)?)?;
        ps.insert("meta.causal_encoder", scalar(if self.enrich.causal_encoder { 1.0 } else { 0.0 })?)?;
        Ok(ps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }

    /// `[T, d]` latents of one waveform: the posterior mean once the
    /// bottleneck is trained, the deterministic encoder output before.
    pub fn latents(&self, samples: &[f64]) -> Result<Tensor<f64>> {
        let s: Session<f64> = Session::eval(&self.gen);
        let x = Var::constant(Tensor::new(vec![1, samples.len()], samples.to_vec())?);
        let z_ae = self.codec.encode(&s, &x)?;
        let (t, d) = (z_ae.shape()[1], z_ae.shape()[2]);
        let z = if self.stage >= 2 { posterior(&s, &self.codec.cfg, &z_ae)?.mu } else { z_ae };
        Tensor::new(vec![t, d], z.value().data().to_vec())
    }

    pub fn encode_waveform(&self, samples: &[f64], sample_rate: u32) -> Result<LatentFile> {
        let cfg = &self.codec.cfg;
        if sample_rate != cfg.sample_rate {
            return Err(Error::SampleRate { expected: cfg.sample_rate, actual: sample_rate });
        }
        if samples.is_empty() {
            return Err(Error::invalid("cannot encode an empty waveform"));
        }
        Ok(LatentFile { frame_rate: cfg.frame_rate(), latent_dim: cfg.latent_dim as u32, frames: self.latents(samples)? })
    }

    /// Waveform of `T * hop` samples.
    pub fn decode_latents(&self, lf: &LatentFile) -> Result<Vec<f64>> {
        let cfg = &self.codec.cfg;
        if lf.frame_rate != cfg.frame_rate() || lf.latent_dim as usize != cfg.latent_dim {
            return Err(Error::Config(format!(
                "latent file is {} Hz x {} dims, the tokenizer expects {} Hz x {}",
                lf.frame_rate,
                lf.latent_dim,
                cfg.frame_rate(),
                cfg.latent_dim
            )));
        }
        let (t, d) = (lf.frames.shape()[0], cfg.latent_dim);
        if t == 0 {
            return Err(Error::invalid("latent file holds no frames"));
        }
        let s: Session<f64> = Session::eval(&self.gen);
        let z = Var::constant(Tensor::new(vec![1, t, d], lf.frames.data().to_vec())?);
        Ok(self.codec.decode(&s, &z)?.value().data().to_vec())
    }

    /// Loads a checkpoint written for `preset`, validating every shape.
    pub fn load(path: &Path, preset: &str, enrich: EnrichConfig) -> Result<Self> {
        let loaded = load_checkpoint(path)?;
        Self::from_checkpoint(&loaded, preset, enrich)
    }

    /// Loads a checkpoint, taking the preset from its sample rate and the
    /// supervision-encoder masking from its metadata.
    pub fn open(path: &Path, enrich: EnrichConfig) -> Result<Self> {
        let loaded = load_checkpoint(path)?;
        let rate = loaded.get("meta.sample_rate")?.data()[0] as u32;
        let preset = ["toy", "paper"]
            .into_iter()
            .find(|p| CodecConfig::preset(p).is_ok_and(|c| c.sample_rate == rate))
            .ok_or_else(|| Error::Config(format!("no preset runs at {rate} Hz")))?;
        Self::from_checkpoint(&loaded, preset, enrich)
    }

    pub fn from_checkpoint(loaded: &ParameterSet, preset: &str, mut enrich: EnrichConfig) -> Result<Self> {
        if let Ok(flag) = loaded.get("meta.causal_encoder") {
            enrich.causal_encoder = flag.data()[0] != 0.0;
        }
        let mut tok = Self::new(preset, enrich, 0)?;
        validate_against(loaded, &tok.to_checkpoint()?)?;
        let gen_names: Vec<String> = tok.gen.names().map(String::from).collect();
        for n in gen_names {
            tok.gen.set(&n, loaded.get(&n)?.clone())?;
        }
        let disc_names: Vec<String> = tok.disc_params.names().map(String::from).collect();
        for n in disc_names {
            tok.disc_params.set(&n, loaded.get(&n)?.clone())?;
        }
        tok.stage = loaded.get("meta.stage")?.data()[0] as u32;
        tok.step = loaded.get("meta.step")?.data()[0] as u64;
        Ok(tok)
    }
}

/// One training batch: waveforms, posterior noise and supervision targets.
pub struct Batch {
    pub x: Tensor<f64>,
    pub eps: Tensor<f64>,
    pub targets: Vec<(Task, Vec<u32>)>,
}

/// Draws `batch` utterances (with replacement), crops or zero-pads them to
/// `crop` samples, and draws posterior noise and a task per utterance.
pub fn make_batch(corpus: &[Utterance], batch: usize, crop: usize, codec: &Codec, rng: &mut impl Rng) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    let mut x = Vec::with_capacity(batch * crop);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let u = &corpus[rng.random_range(0..corpus.len())];
        let start = if u.samples.len() > crop { rng.random_range(0..=u.samples.len() - crop) } else { 0 };
        let seg = &u.samples[start..(start + crop).min(u.samples.len())];
        x.extend_from_slice(seg);
        x.extend(std::iter::repeat_n(0.0, crop - seg.len()));
        let task = Task::ALL[rng.random_range(0..Task::ALL.len())];
        targets.push((task, u.target(task).to_vec()));
    }
    let frames = codec.cfg.n_frames(crop);
    let eps = standard_normal(&[batch, frames, codec.cfg.latent_dim], rng);
    Ok(Batch { x: Tensor::new(vec![batch, crop], x)?, eps, targets })
}

/// Graph nodes of every generator-side loss term.
pub struct LossTerms<T: Real> {
    pub mel: Var<T>,
    pub adv: Var<T>,
    pub fm: Var<T>,
    pub kl: Option<Var<T>>,
    pub distill_frame: Option<Var<T>>,
    pub distill_utt: Option<Var<T>>,
    pub sup: Option<Var<T>>,
    pub total: Var<T>,
    pub x_hat: Var<T>,
}

/// Generator objective of `plan` on one batch. Every parameter name is
/// resolved through `s`, so the caller decides what is trainable.
pub fn generator_losses<T: Real>(
    tok: &Tokenizer,
    s: &Session<T>,
    plan: &StagePlan,
    weights: &LossWeights,
    batch: &Batch,
) -> Result<LossTerms<T>> {
    let x = Var::constant(Tensor::<T>::from_f64(&batch.x));
    let codec = &tok.codec;
    let z_ae = codec.encode(s, &x)?;
    let (z, kl) = if plan.stage == Stage::I {
        (z_ae, None)
    } else {
        let post = posterior(s, &codec.cfg, &z_ae)?;
        let eps = Tensor::<T>::from_f64(&batch.eps);
        let z = sample_reparameterized(&post, &eps)?;
        let kl = kl_with_flow(s, &codec.cfg, &post, &[eps])?;
        (z, Some(kl))
    };
    let x_hat = codec.decode(s, &z)?;
    let mel = multiscale_mel_loss(&x, &x_hat, &tok.mel_scales())?;
    let disc = tok.discriminator();
    let real = disc.forward(s, &x)?;
    let fake = disc.forward(s, &x_hat)?;
    let (adv, _) = gan_losses(&real.scores, &fake.scores)?;
    let fm = feature_matching_loss(&real.features, &fake.features)?;
    let mut total = mel.scale(weights.spec)?.add(&adv.scale(weights.adv)?)?.add(&fm.scale(weights.fm)?)?;
    if let (Some(kl), Some(beta)) = (&kl, plan.beta) {
        total = total.add(&kl.scale(beta)?)?;
    }
    let (mut distill_frame, mut distill_utt, mut sup) = (None, None, None);
    if plan.uses(LossKind::Distill) {
        let d = distill_loss(s, &tok.enrich, &z, &x)?;
        total = total
            .add(&d.frame.scale(weights.distill_frame)?)?
            .add(&d.utterance.scale(weights.distill_utt)?)?;
        distill_frame = Some(d.frame);
        distill_utt = Some(d.utterance);
    }
    if plan.uses(LossKind::Sup) {
        let b = z.shape()[0];
        let (t, d) = (z.shape()[1], z.shape()[2]);
        let mut acc: Option<Var<T>> = None;
        for (i, (task, y)) in batch.targets.iter().enumerate().take(b) {
            let zi = z.narrow(0, i, 1)?.reshape(&[t, d])?;
            let l = supervision_loss(s, &tok.enrich, &zi, *task, y)?;
            acc = Some(match acc {
                Some(a) => a.add(&l)?,
                None => l,
            });
        }
        let l = acc.ok_or_else(|| Error::invalid("supervision needs at least one target"))?.scale(1.0 / b as f64)?;
        total = total.add(&l.scale(weights.sup)?)?;
        sup = Some(l);
    }
    Ok(LossTerms { mel, adv, fm, kl, distill_frame, distill_utt, sup, total, x_hat })
}

/// Session over generator, discriminator and teachers. The discriminator
/// is a constant here; teachers are frozen by their own set.
pub fn generator_session<T: Real>(tok: &Tokenizer) -> Session<'_, T> {
    Session::with_sets(vec![&tok.gen, &tok.disc_params, &tok.teachers.params], true).freeze("disc")
}

fn value<T: Real>(v: &Var<T>) -> f64 {
    Real::to_f64(v.item())
}

struct StepOutcome {
    row: LogRow,
}

#[allow(clippy::too_many_arguments)]
fn train_step<T: Real>(
    tok: &mut Tokenizer,
    plan: &StagePlan,
    cfg: &TrainConfig,
    batch: &Batch,
    opt_g: &mut OptimizerState,
    opt_d: &mut OptimizerState,
    lr: f64,
    step: usize,
) -> Result<StepOutcome> {
    let (terms_vals, grads, x_hat) = {
        let s = generator_session::<T>(tok);
        let t = generator_losses(tok, &s, plan, &cfg.loss_weights, batch)?;
        t.total.backward()?;
        let vals = (
            value(&t.mel),
            value(&t.adv),
            value(&t.fm),
            t.kl.as_ref().map(value),
            t.distill_frame.as_ref().map(value),
            t.distill_utt.as_ref().map(value),
            t.sup.as_ref().map(value),
            value(&t.total),
        );
        (vals, s.grads(), t.x_hat.value().to_f64())
    };
    let grad_norm = adamw_step(&mut tok.gen, &grads, opt_g, &cfg.optimizer, lr)?;

    // discriminator update on the detached reconstruction, 1:1 cadence
    let disc_loss = {
        let s = Session::<T>::train(&tok.disc_params);
        let disc = tok.discriminator();
        let real = disc.forward(&s, &Var::constant(Tensor::<T>::from_f64(&batch.x)))?;
        let fake = disc.forward(&s, &Var::constant(Tensor::<T>::from_f64(&x_hat)))?;
        let (_, ld) = gan_losses(&real.scores, &fake.scores)?;
        ld.backward()?;
        let g = s.grads();
        let v = value(&ld);
        drop(s);
        adamw_step(&mut tok.disc_params, &g, opt_d, &cfg.optimizer, lr)?;
        v
    };
    let (mel, adv, fm, kl, df, du, sup, total) = terms_vals;
    Ok(StepOutcome {
        row: LogRow {
            step,
            stage: plan.stage.number(),
            lr,
            mel,
            adv,
            fm,
            disc: disc_loss,
            kl,
            distill_frame: df,
            distill_utt: du,
            sup,
            total,
            grad_norm,
        },
    })
}

/// Checks that `stage` may run on a model whose last completed stage is
/// `done`.
pub fn check_stage_order(stage: Stage, done: u32) -> Result<()> {
    match stage {
        Stage::II if done < 1 => Err(Error::StageOrder("stage 1 checkpoint required before stage 2".into())),
        Stage::III if done < 2 => Err(Error::StageOrder("stage 2 checkpoint required before stage 3".into())),
        _ => Ok(()),
    }
}

/// Runs `plan` on `corpus`, updating `tok` in place.
pub fn run_stage(tok: &mut Tokenizer, plan: &StagePlan, corpus: &[Utterance], cfg: &TrainConfig) -> Result<TrainingLog> {
    check_stage_order(plan.stage, tok.stage)?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    if let Some(u) = corpus.iter().find(|u| u.sample_rate != tok.codec.cfg.sample_rate) {
        return Err(Error::SampleRate { expected: tok.codec.cfg.sample_rate, actual: u.sample_rate });
    }
    tok.enrich.lambda_frame = cfg.loss_weights.distill_frame;
    tok.enrich.lambda_utt = cfg.loss_weights.distill_utt;
    tok.enrich.lambda_sup = cfg.loss_weights.sup;
    if tok.enrich.causal_encoder != cfg.ablation.causal_supervision_encoder {
        tok.enrich.causal_encoder = cfg.ablation.causal_supervision_encoder;
    }
    tok.gen.unfreeze_all();
    for p in &plan.frozen {
        tok.gen.freeze(p.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((plan.stage.number() as u64) << 32));
    let (mut opt_g, mut opt_d) = (OptimizerState::new(), OptimizerState::new());
    let crop = cfg.crop_samples(&tok.codec.cfg);
    let mut log = TrainingLog::default();
    for step in 0..plan.steps {
        let batch = make_batch(corpus, cfg.batch, crop, &tok.codec, &mut rng)?;
        let lr = cfg.schedule.at(tok.step as i64)?;
        let out = match cfg.precision {
            Precision::F32 => train_step::<f32>(tok, plan, cfg, &batch, &mut opt_g, &mut opt_d, lr, step)?,
            Precision::F64 => train_step::<f64>(tok, plan, cfg, &batch, &mut opt_g, &mut opt_d, lr, step)?,
        };
        tok.step += 1;
        log.rows.push(out.row);
    }
    tok.gen.unfreeze_all();
    tok.stage = plan.stage.number();
    Ok(log)
}

/// Gradient L2 norm of every parameter under the Stage-III objective on one
/// batch. With `teachers_trainable` the teacher tensors are bound as
/// ordinary leaves, so the stop-gradient shows up as exact zeros.
pub fn stage_three_gradient_norms(
    tok: &Tokenizer,
    batch: &Batch,
    weights: &LossWeights,
    ablation: &Ablation,
    teachers_trainable: bool,
) -> Result<BTreeMap<String, f64>> {
    let plan = StagePlan::new(Stage::III, 1, weights, ablation);
    let mut teachers = tok.teachers.params.clone();
    if teachers_trainable {
        teachers.unfreeze_all();
    }
    let mut gen = tok.gen.clone();
    gen.unfreeze_all();
    let s = Session::<f64>::with_sets(vec![&gen, &tok.disc_params, &teachers], true).freeze("disc");
    let t = generator_losses(tok, &s, &plan, weights, batch)?;
    t.total.backward()?;
    Ok(s.grads().into_iter().map(|(k, g)| (k, g.sum_sq().sqrt())).collect())
}

/// Mean multi-scale mel loss of the reconstruction of each utterance, using
/// posterior samples (`sampled`) or the deterministic encoder output.
pub fn reconstruction_loss(tok: &Tokenizer, corpus: &[Utterance], sampled: bool, seed: u64) -> Result<f64> {
    let s: Session<f32> = Session::eval(&tok.gen);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for u in corpus {
        let x = Var::constant(Tensor::new(vec![1, u.samples.len()], u.samples.iter().map(|&v| v as f32).collect())?);
        let mut z = tok.codec.encode(&s, &x)?;
        if sampled {
            let post = posterior(&s, &tok.codec.cfg, &z)?;
            let eps = standard_normal::<f32>(z.shape(), &mut rng);
            z = sample_reparameterized(&post, &eps)?;
        }
        let y = tok.codec.decode(&s, &z)?.narrow(1, 0, u.samples.len())?;
        total += value(&multiscale_mel_loss(&x, &y, &tok.mel_scales())?);
    }
    Ok(total / corpus.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_file_round_trip_lengths() {
        let tok = Tokenizer::new("toy", EnrichConfig::default(), 0).unwrap();
        let lf = tok.encode_waveform(&vec![0.1; 100], 8000).unwrap();
        assert_eq!((lf.frame_rate, lf.latent_dim, lf.frames.shape()[0]), (125, 8, 2));
        assert_eq!(tok.decode_latents(&lf).unwrap().len(), 128);
        let err = tok.encode_waveform(&[0.0; 10], 16000).unwrap_err().to_string();
        assert!(err.contains("8000") && err.contains("16000"), "{err}");
        let wrong = LatentFile { frame_rate: 25, ..lf };
        assert!(tok.decode_latents(&wrong).is_err());
    }

    #[test]
    fn open_restores_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.htok");
        let mut tok = Tokenizer::new("toy", EnrichConfig { causal_encoder: true, ..EnrichConfig::default() }, 3).unwrap();
        tok.stage = 2;
        tok.save(&path).unwrap();
        let back = Tokenizer::open(&path, EnrichConfig::default()).unwrap();
        assert!(back.enrich.causal_encoder);
        assert_eq!((back.stage, back.codec.cfg.sample_rate), (2, 8000));
        assert_eq!(back.gen.fingerprint(""), tok.gen.fingerprint(""));
    }
}
