//! Downstream data preparation and mixed TTS / ASR training.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::{build_layout, LayoutTask};
use super::model::{
    backbone_forward, eos_logits, eos_loss, fm_loss, patch_encode, patch_states, understanding_loss, DitContext,
    PatchMode,
};
use super::patch::patchify;
use super::UnifiedModel;
use crate::codec::bottleneck::{posterior, standard_normal};
use crate::dsp::corpus::{class_label, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{Real, Session, Tensor, Var};
use crate::pipeline::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::pipeline::stages::Tokenizer;
use crate::pipeline::Precision;

/// Which latents of the frozen tokenizer feed the downstream model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// Posterior mean.
    Mean,
    /// One posterior sample per utterance.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tasks {
    Tts,
    Asr,
    Unified,
}

impl std::str::FromStr for Tasks {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tts" => Ok(Tasks::Tts),
            "asr" => Ok(Tasks::Asr),
            "unified" => Ok(Tasks::Unified),
            other => Err(Error::Config(format!("unknown task set `{other}` (expected tts, asr or unified)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub tasks: Tasks,
    pub steps: usize,
    /// Examples per optimizer step.
    pub batch: usize,
    pub seed: u64,
    /// TTS : ASR sampling weights for the unified task set.
    pub tts_weight: u32,
    pub asr_weight: u32,
    /// Probability that a TTS example carries a description prefix.
    pub desc_prob: f64,
    pub latents: LatentSource,
    pub freeze_semantic_encoder: bool,
    pub dit_init: Option<PathBuf>,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub precision: Precision,
}

/// Initial learning rate of the toy downstream model.
pub const TOY_DOWNSTREAM_LR: f64 = 1e-3;

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self::toy(2000)
    }
}

impl DownstreamConfig {
    pub fn toy(steps: usize) -> Self {
        Self {
            tasks: Tasks::Unified,
            steps,
            batch: 3,
            seed: 0,
            tts_weight: 5,
            asr_weight: 1,
            desc_prob: 0.0,
            latents: LatentSource::Mean,
            freeze_semantic_encoder: false,
            dit_init: None,
            optimizer: AdamWConfig::downstream(),
            schedule: LrSchedule::Cosine {
                lr0: TOY_DOWNSTREAM_LR,
                warmup: (steps / 20) as u64,
                total: steps as u64,
                min_lr: 1e-5,
            },
            precision: Precision::F32,
        }
    }

    pub fn validate(&self, mode: PatchMode) -> Result<()> {
        if self.freeze_semantic_encoder && mode != PatchMode::MeanPoolLinear {
            return Err(Error::Config("--freeze-semantic-encoder requires the mean_pool_linear patch mode".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.tts_weight + self.asr_weight == 0 {
            return Err(Error::Config("task weights must not both be zero".into()));
        }
        if !(0.0..=1.0).contains(&self.desc_prob) {
            return Err(Error::Config("desc_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn pick_task(&self, rng: &mut impl Rng) -> LayoutTask {
        let tts = match self.tasks {
            Tasks::Tts => true,
            Tasks::Asr => false,
            Tasks::Unified => rng.random_range(0..self.tts_weight + self.asr_weight) < self.tts_weight,
        };
        match (tts, rng.random_bool(self.desc_prob)) {
            (false, _) => LayoutTask::Asr,
            (true, false) => LayoutTask::Tts,
            (true, true) => LayoutTask::DescTts,
        }
    }
}

/// One utterance as the downstream model sees it.
#[derive(Debug, Clone)]
pub struct Example {
    pub text: Vec<u32>,
    /// Class word used as the description.
    pub desc: Vec<u32>,
    /// `[T, d]` latents from the frozen tokenizer.
    pub z: Tensor<f64>,
}

/// Encodes `corpus` through the frozen tokenizer.
pub fn prepare_examples(tok: &Tokenizer, corpus: &[Utterance], source: LatentSource, seed: u64) -> Result<Vec<Example>> {
    let s: Session<f64> = Session::eval(&tok.gen);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|u| {
            let x = Var::constant(Tensor::new(vec![1, u.samples.len()], u.samples.clone())?);
            let z_ae = tok.codec.encode(&s, &x)?;
            let (t, d) = (z_ae.shape()[1], z_ae.shape()[2]);
            let z = if tok.stage >= 2 {
                let p = posterior(&s, &tok.codec.cfg, &z_ae)?;
                let mu = p.mu.value().data().to_vec();
                match source {
                    LatentSource::Mean => mu,
                    LatentSource::Sample => {
                        let eps: Tensor<f64> = standard_normal(&[t * d], &mut rng);
                        mu.iter()
                            .zip(p.log_sigma.value().data())
                            .zip(eps.data())
                            .map(|((m, ls), e)| m + ls.exp() * e)
                            .collect()
                    }
                }
            } else {
                z_ae.value().data().to_vec()
            };
            Ok(Example { text: u.transcript.clone(), desc: vec![class_label(&u.transcript)], z: Tensor::new(vec![t, d], z)? })
        })
        .collect()
}

/// Loss terms of one example; absent terms are `None`.
pub struct DownstreamTerms<T: Real> {
    pub ce: Option<Var<T>>,
    pub fm: Option<Var<T>>,
    pub eos: Option<Var<T>>,
    pub total: Var<T>,
}

/// Loss of `ex` under `task`: understanding cross-entropy for ASR,
/// `fm + lambda_eos * eos` for TTS.
pub fn example_loss<T: Real>(
    s: &Session<T>,
    model: &UnifiedModel,
    ex: &Example,
    task: LayoutTask,
    rng: &mut impl Rng,
) -> Result<DownstreamTerms<T>> {
    let cfg = &model.cfg;
    let seq = patchify(&ex.z, cfg.patch)?;
    let k = seq.count();
    let layout = build_layout(task, &ex.text, k, &ex.desc)?;
    let z = Var::constant(Tensor::<T>::from_f64(&ex.z));
    let audio = patch_encode(s, cfg, Some(&model.enrich), &z)?;
    let out = backbone_forward(s, cfg, &layout, Some(&audio))?;
    if task == LayoutTask::Asr {
        let ce = understanding_loss(&out, &layout)?;
        return Ok(DownstreamTerms { total: ce.clone(), ce: Some(ce), fm: None, eos: None });
    }
    let patches = Var::constant(Tensor::<T>::from_f64(&seq.patches)).scale(1.0 / model.latent_scale())?;
    let ctx = DitContext::teacher_forced(cfg, patch_states(&out, &layout)?, &patches)?;
    let t: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
    let eps = standard_normal::<T>(seq.patches.shape(), rng);
    let fm = fm_loss(s, cfg, &ctx, &patches, &seq.mask(), &t, &eps)?;
    let labels: Vec<f64> = (0..k).map(|i| if i + 1 == k { 1.0 } else { 0.0 }).collect();
    let eos = eos_loss(&eos_logits(s, &out, &layout)?, &labels)?;
    let total = fm.add(&eos.scale(cfg.lambda_eos)?)?;
    Ok(DownstreamTerms { ce: None, fm: Some(fm), eos: Some(eos), total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub step: usize,
    pub task: String,
    pub lr: f64,
    pub ce: Option<f64>,
    pub fm: Option<f64>,
    pub eos: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DownstreamLog {
    pub rows: Vec<DownstreamRow>,
}

impl DownstreamLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Mean of a component over the last `n` rows that have it.
    pub fn recent_mean(&self, n: usize, f: impl Fn(&DownstreamRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().rev().filter_map(f).take(n).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn task_name(t: LayoutTask) -> &'static str {
    match t {
        LayoutTask::Tts => "tts",
        LayoutTask::Asr => "asr",
        LayoutTask::DescTts => "desc_tts",
    }
}

fn step<T: Real>(model: &mut UnifiedModel, ex: &Example, task: LayoutTask, rng: &mut ChaCha8Rng) -> Result<(DownstreamRow, BTreeMap<String, Tensor<f64>>)> {
    let s: Session<T> = Session::train(&model.params);
    let terms = example_loss(&s, model, ex, task, rng)?;
    terms.total.backward()?;
    let v = |x: &Option<Var<T>>| x.as_ref().map(|x| Real::to_f64(x.item()));
    let row = DownstreamRow {
        step: 0,
        task: task_name(task).into(),
        lr: 0.0,
        ce: v(&terms.ce),
        fm: v(&terms.fm),
        eos: v(&terms.eos),
        total: Real::to_f64(terms.total.item()),
        grad_norm: 0.0,
    };
    Ok((row, s.grads()))
}

/// Trains `model` on `examples` for `cfg.steps` steps of `cfg.batch`
/// examples each; every example draws its task independently, and the
/// gradient is the batch mean.
pub fn train_downstream(model: &mut UnifiedModel, examples: &[Example], cfg: &DownstreamConfig) -> Result<DownstreamLog> {
    cfg.validate(model.cfg.patch_mode)?;
    if examples.is_empty() {
        return Err(Error::invalid("empty downstream training set"));
    }
    model.params.unfreeze_all();
    model.fit_latent_scale(examples)?;
    if cfg.freeze_semantic_encoder {
        model.params.freeze("sup.enc");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new();
    let mut log = DownstreamLog::default();
    for i in 0..cfg.steps {
        let mut rows = Vec::with_capacity(cfg.batch);
        let mut grads: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        for _ in 0..cfg.batch {
            let ex = &examples[rng.random_range(0..examples.len())];
            let task = cfg.pick_task(&mut rng);
            let (row, g) = match cfg.precision {
                Precision::F32 => step::<f32>(model, ex, task, &mut rng)?,
                Precision::F64 => step::<f64>(model, ex, task, &mut rng)?,
            };
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
            rows.push(row);
        }
        let scale = 1.0 / cfg.batch as f64;
        grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
        let lr = cfg.schedule.at(i as i64)?;
        let mut row = merge_rows(&rows);
        row.grad_norm = adamw_step(&mut model.params, &grads, &mut opt, &cfg.optimizer, lr)?;
        row.step = i;
        row.lr = lr;
        log.rows.push(row);
    }
    Ok(log)
}

/// One log row for a batch: tasks joined with `+`, each term averaged
/// over the examples that have it.
fn merge_rows(rows: &[DownstreamRow]) -> DownstreamRow {
    let mean = |f: fn(&DownstreamRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    DownstreamRow {
        step: 0,
        task: rows.iter().map(|r| r.task.as_str()).collect::<Vec<_>>().join("+"),
        lr: 0.0,
        ce: mean(|r| r.ce),
        fm: mean(|r| r.fm),
        eos: mean(|r| r.eos),
        total: rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64,
        grad_norm: 0.0,
    }
}

/// Result of the factorization probe.
#[derive(Debug, Clone, Serialize)]
pub struct FactorizationReport {
    pub patches: usize,
    /// Largest gradient magnitude of a patch's flow loss with respect to
    /// any later latent frame. Must be exactly zero.
    pub max_future_grad: f64,
    /// Largest gradient magnitude with respect to earlier frames; nonzero
    /// shows the probe exercises the conditioning path.
    pub max_past_grad: f64,
    pub pass: bool,
}

/// Differentiates the flow-matching error of each patch with respect to
/// the input latents in 64-bit mode. Zero-initialized read-outs are
/// randomized first so every conditioning path carries signal.
pub fn factorization_probe(model: &UnifiedModel, ex: &Example, seed: u64) -> Result<FactorizationReport> {
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.params.clone();
    params.randomize_zero_weights(0.05, &mut rng)?;
    let s: Session<f64> = Session::eval(&params);
    let seq = patchify(&ex.z, cfg.patch)?;
    let (k, p, d) = (seq.count(), cfg.patch, cfg.latent_dim);
    let layout = build_layout(LayoutTask::Tts, &ex.text, k, &ex.desc)?;
    let t: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
    let eps: Tensor<f64> = standard_normal(seq.patches.shape(), &mut rng);
    let (mut future, mut past) = (0.0f64, 0.0f64);
    for target in 0..k {
        let z = Var::leaf(ex.z.clone(), true)?;
        let audio = patch_encode(&s, cfg, Some(&model.enrich), &z)?;
        let out = backbone_forward(&s, cfg, &layout, Some(&audio))?;
        let patches = super::model::pad_rows(&z, k * p)?.reshape(&[k, p, d])?.scale(1.0 / model.latent_scale())?;
        let ctx = DitContext::teacher_forced(cfg, patch_states(&out, &layout)?, &patches)?;
        let (err, _) = super::model::fm_terms(&s, cfg, &ctx, &patches, &seq.mask(), &t, &eps)?;
        err.narrow(0, target, 1)?.sum()?.backward()?;
        let g = z.take_grad().ok_or_else(|| Error::invalid("probe produced no gradient"))?;
        for (i, v) in g.data().iter().enumerate() {
            let frame_patch = i / d / p;
            if frame_patch > target {
                future = future.max(v.abs());
            } else if frame_patch < target {
                past = past.max(v.abs());
            }
        }
    }
    Ok(FactorizationReport { patches: k, max_future_grad: future, max_past_grad: past, pass: future == 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enrich::EnrichConfig;
    use crate::unified::UnifiedConfig;

    #[test]
    fn factorization_probe_on_fresh_toy_model() {
        let tok = Tokenizer::new("toy", EnrichConfig::default(), 0).unwrap();
        let cfg = UnifiedConfig { width: 32, layers: 2, dit_width: 32, dit_layers: 2, encoder_layers: 1, ..UnifiedConfig::default() };
        let model = UnifiedModel::new(cfg, &tok, 1).unwrap();
        let ex = Example { text: vec![1, 2, 3], desc: vec![16], z: crate::codec::bottleneck::standard_normal(&[14, 8], &mut ChaCha8Rng::seed_from_u64(2)) };
        let r = factorization_probe(&model, &ex, 3).unwrap();
        assert!(r.pass && r.max_past_grad > 0.0, "{r:?}");
        assert_eq!(r.patches, 4);
    }

    #[test]
    fn latent_scale_is_training_rms() {
        let tok = Tokenizer::new("toy", EnrichConfig::default(), 0).unwrap();
        let mut model = UnifiedModel::new(UnifiedConfig::default(), &tok, 0).unwrap();
        assert_eq!(model.latent_scale(), 1.0);
        let ex = |v: f64| Example { text: vec![1], desc: vec![16], z: Tensor::filled(vec![4, 8], v) };
        model.fit_latent_scale(&[ex(0.3), ex(-0.4)]).unwrap();
        assert!((model.latent_scale() - 0.125f64.sqrt()).abs() < 1e-15);
        assert!(model.fit_latent_scale(&[ex(0.0)]).is_err());
    }

    #[test]
    fn batch_rows_average_present_terms() {
        let row = |task: &str, ce: Option<f64>, fm: Option<f64>, total: f64| DownstreamRow {
            step: 0,
            task: task.into(),
            lr: 0.0,
            ce,
            fm,
            eos: fm.map(|_| 0.5),
            total,
            grad_norm: 0.0,
        };
        let m = merge_rows(&[row("tts", None, Some(1.0), 2.0), row("asr", Some(3.0), None, 3.0), row("tts", None, Some(2.0), 4.0)]);
        assert_eq!(m.task, "tts+asr+tts");
        assert_eq!((m.ce, m.fm, m.eos, m.total), (Some(3.0), Some(1.5), Some(0.5), 3.0));
    }

    #[test]
    fn flag_validation_and_task_mix() {
        let c = DownstreamConfig { freeze_semantic_encoder: true, ..DownstreamConfig::toy(10) };
        assert!(c.validate(PatchMode::PatchEncoder).is_err());
        assert!(c.validate(PatchMode::MeanPoolLinear).is_ok());
        assert!(DownstreamConfig { batch: 0, ..DownstreamConfig::toy(10) }.validate(PatchMode::PatchEncoder).is_err());
        let c = DownstreamConfig::toy(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tts = (0..6000).filter(|_| c.pick_task(&mut rng) != LayoutTask::Asr).count();
        assert!((tts as f64 / 6000.0 - 5.0 / 6.0).abs() < 0.02);
        let tok = Tokenizer::new("toy", EnrichConfig::default(), 0).unwrap();
        let cfg = UnifiedConfig { patch_mode: PatchMode::MeanPoolLinear, ..UnifiedConfig::default() };
        let model = UnifiedModel::new(cfg, &tok, 0).unwrap();
        assert!(model.params.names().any(|n| n.starts_with("sup.enc.")));
        assert!(model.check_tasks(Tasks::Unified).is_err());
        assert!(model.check_tasks(Tasks::Asr).is_ok());
    }
}
