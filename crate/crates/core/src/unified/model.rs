//! Backbone, patch encoders, EOS head and the flow-matching DiT head.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{SequenceLayout, Token, VOCAB};
use crate::enrich::supervision::encode_latents;
use crate::enrich::EnrichConfig;
use crate::error::{Error, Result};
use crate::numerics::nn;
use crate::numerics::{concat, ParameterSet, Real, Session, Tensor, Var};

/// EOS logits are clipped to this magnitude before the cross-entropy.
pub const EOS_LOGIT_CLIP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Small transformer over the frames of each patch.
    PatchEncoder,
    /// Mean of supervision-encoder features per patch, then a linear map.
    MeanPoolLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnifiedConfig {
    pub patch: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_mode: PatchMode,
    pub encoder_layers: usize,
    pub dit_width: usize,
    pub dit_layers: usize,
    pub dit_heads: usize,
    /// Backbone states and previous patches visible to the DiT, each.
    pub dit_window: usize,
    pub lambda_eos: f64,
    pub fm_steps: usize,
    pub k_max: usize,
    pub eos_threshold: f64,
    pub max_text: usize,
}

impl Default for UnifiedConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            latent_dim: 8,
            width: 128,
            layers: 4,
            heads: 4,
            patch_mode: PatchMode::PatchEncoder,
            encoder_layers: 2,
            dit_width: 128,
            dit_layers: 4,
            dit_heads: 4,
            dit_window: 2,
            lambda_eos: 1.0,
            fm_steps: 16,
            k_max: 128,
            eos_threshold: 0.5,
            max_text: 32,
        }
    }
}

impl UnifiedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch < 1 || self.dit_window < 1 || self.fm_steps < 1 || self.k_max < 1 {
            return bad("patch, dit_window, fm_steps and k_max must be positive");
        }
        if self.width % self.heads != 0 || self.dit_width % self.dit_heads != 0 {
            return bad("widths must be divisible by their head counts");
        }
        if !(0.0..=1.0).contains(&self.eos_threshold) {
            return bad("eos_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    fn slots(&self) -> usize {
        2 * self.dit_window
    }
}

/// Divisor taking tokenizer latents to the flow's working scale. Set
/// from the training data rather than learned.
pub const LATENT_SCALE: &str = "latent_norm.scale";

pub fn init_unified(cfg: &UnifiedConfig, sup_width: usize, rng: &mut impl Rng) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    let (w, wd, p, d) = (cfg.width, cfg.dit_width, cfg.patch, cfg.latent_dim);
    ps.init_normal("ar.embed", &[VOCAB, w], 0.02, rng)?;
    for l in 0..cfg.layers {
        nn::init_block(&mut ps, &format!("ar.block{l}"), w, rng)?;
    }
    nn::init_layer_norm(&mut ps, "ar.norm", w)?;
    // zero read-outs: uniform text logits and EOS probability 1/2
    nn::init_linear_zero(&mut ps, "ar.head", w, VOCAB)?;
    nn::init_linear_zero(&mut ps, "ar.eos", w, 1)?;
    ps.init_const(LATENT_SCALE, &[1], 1.0)?;
    match cfg.patch_mode {
        PatchMode::PatchEncoder => {
            nn::init_linear(&mut ps, "penc.in", d, w, rng)?;
            ps.init_normal("penc.pos", &[p, w], 0.02, rng)?;
            for l in 0..cfg.encoder_layers {
                nn::init_block(&mut ps, &format!("penc.block{l}"), w, rng)?;
            }
            nn::init_layer_norm(&mut ps, "penc.norm", w)?;
        }
        PatchMode::MeanPoolLinear => nn::init_linear(&mut ps, "penc.proj", sup_width, w, rng)?,
    }
    nn::init_linear(&mut ps, "dit.in", d, wd, rng)?;
    ps.init_normal("dit.pos", &[p, wd], 0.02, rng)?;
    ps.init_normal("dit.slot", &[cfg.slots(), wd], 0.02, rng)?;
    nn::init_linear(&mut ps, "dit.hproj", w, wd, rng)?;
    nn::init_linear(&mut ps, "dit.zproj", p * d, wd, rng)?;
    nn::init_linear(&mut ps, "dit.time.fc1", wd, wd, rng)?;
    nn::init_linear(&mut ps, "dit.time.fc2", wd, wd, rng)?;
    for l in 0..cfg.dit_layers {
        let b = format!("dit.block{l}");
        for q in ["q", "k", "v", "o"] {
            nn::init_linear(&mut ps, &format!("{b}.attn.{q}"), wd, wd, rng)?;
        }
        nn::init_linear(&mut ps, &format!("{b}.mlp.fc1"), wd, 4 * wd, rng)?;
        nn::init_linear(&mut ps, &format!("{b}.mlp.fc2"), 4 * wd, wd, rng)?;
        nn::init_linear_zero(&mut ps, &format!("{b}.ada"), wd, 6 * wd)?;
    }
    nn::init_linear_zero(&mut ps, "dit.final.ada", wd, 2 * wd)?;
    nn::init_linear_zero(&mut ps, "dit.out", wd, d)?;
    Ok(ps)
}

/// Appends zero rows to `[T, D]` so it has `rows` rows.
pub(crate) fn pad_rows<T: Real>(x: &Var<T>, rows: usize) -> Result<Var<T>> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if t == rows {
        return Ok(x.clone());
    }
    concat(&[x.clone(), Var::constant(Tensor::zeros(vec![rows - t, d]))], 0)
}

/// Mean over the real frames of each patch, then `penc.proj`.
/// `feats: [T, D] -> [ceil(T / P), width]`.
pub fn mean_pool_linear<T: Real>(s: &Session<T>, feats: &Var<T>, p: usize) -> Result<Var<T>> {
    let (t, d) = (feats.shape()[0], feats.shape()[1]);
    let k = t.div_ceil(p);
    let pooled = pad_rows(feats, k * p)?.reshape(&[k, p, d])?.sum_axis(1)?;
    let inv: Vec<T> = (0..k).map(|i| T::from_f64(1.0 / ((t - i * p).min(p)) as f64)).collect();
    let pooled = pooled.mul(&Var::constant(Tensor::new(vec![k, 1], inv)?))?;
    nn::linear(s, "penc.proj", &pooled)
}

/// One backbone-width embedding per patch of `z: [T, d]`.
pub fn patch_encode<T: Real>(
    s: &Session<T>,
    cfg: &UnifiedConfig,
    enrich: Option<&EnrichConfig>,
    z: &Var<T>,
) -> Result<Var<T>> {
    let &[t, d] = z.shape() else {
        return Err(Error::shape("patch_encode", format!("latents must be [T, d], got {:?}", z.shape())));
    };
    let p = cfg.patch;
    let k = t.div_ceil(p);
    match cfg.patch_mode {
        PatchMode::PatchEncoder => {
            if !s.has("penc.in.weight") {
                return Err(Error::Config("patch_encoder mode needs penc.in".into()));
            }
            let x = pad_rows(z, k * p)?.reshape(&[k, p, d])?;
            let mut h = nn::linear(s, "penc.in", &x)?.add(&s.p("penc.pos")?)?;
            for l in 0..cfg.encoder_layers {
                h = nn::block(s, &format!("penc.block{l}"), &h, cfg.heads, None)?;
            }
            nn::layer_norm(s, "penc.norm", &h)?.mean_axis(1)
        }
        PatchMode::MeanPoolLinear => {
            let enrich = enrich.ok_or_else(|| Error::Config("mean_pool_linear mode needs the supervision encoder".into()))?;
            if !s.has("penc.proj.weight") {
                return Err(Error::Config("mean_pool_linear mode needs penc.proj".into()));
            }
            mean_pool_linear(s, &encode_latents(s, enrich, z)?, p)
        }
    }
}

/// Causal backbone states `[N, width]` and text logits `[N, vocab]`.
pub struct BackboneOut<T: Real> {
    pub hidden: Var<T>,
    pub logits: Var<T>,
}

/// Runs the backbone over `layout`, taking audio-patch embeddings from
/// `audio: [K, width]`.
pub fn backbone_forward<T: Real>(
    s: &Session<T>,
    cfg: &UnifiedConfig,
    layout: &SequenceLayout,
    audio: Option<&Var<T>>,
) -> Result<BackboneOut<T>> {
    let n = layout.len();
    let w = cfg.width;
    if n == 0 || layout.loss.len() != n {
        return Err(Error::invalid("layout must be non-empty with one mask entry per token"));
    }
    let ids: Vec<usize> = layout.tokens.iter().map(|t| t.id().unwrap_or(0)).collect();
    let mut x = s.p("ar.embed")?.index_rows(&ids)?;
    let max_patch = layout.tokens.iter().filter_map(|t| if let Token::Audio(k) = t { Some(*k) } else { None }).max();
    if let Some(kmax) = max_patch {
        let audio = audio.ok_or_else(|| Error::invalid("layout has audio patches but no audio embeddings"))?;
        if audio.shape().len() != 2 || audio.shape()[0] <= kmax || audio.shape()[1] != w {
            return Err(Error::shape("backbone", format!("audio {:?} for patch {kmax}", audio.shape())));
        }
        let table = concat(&[x, audio.clone()], 0)?;
        let mut idx = Vec::with_capacity(n * w);
        for (i, t) in layout.tokens.iter().enumerate() {
            let row = if let Token::Audio(k) = t { n + k } else { i };
            idx.extend(row * w..(row + 1) * w);
        }
        x = table.gather(Rc::new(idx), &[n, w])?;
    }
    let mut h = x.add(&nn::positions(n, w))?.reshape(&[1, n, w])?;
    let mask = nn::causal_mask(n);
    for l in 0..cfg.layers {
        h = nn::block(s, &format!("ar.block{l}"), &h, cfg.heads, Some(mask.clone()))?;
    }
    let hidden = nn::layer_norm(s, "ar.norm", &h)?.reshape(&[n, w])?;
    let logits = nn::linear(s, "ar.head", &hidden)?;
    Ok(BackboneOut { hidden, logits })
}

/// Mean next-token cross-entropy over rows with a target.
pub fn masked_cross_entropy<T: Real>(logits: &Var<T>, targets: &[Option<usize>]) -> Result<Var<T>> {
    if logits.shape().len() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::shape("cross-entropy", format!("logits {:?} for {} targets", logits.shape(), targets.len())));
    }
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::invalid("empty loss span"));
    }
    let tgt: Vec<usize> = rows.iter().map(|&i| targets[i].unwrap()).collect();
    if let Some(&bad) = tgt.iter().find(|&&t| t >= logits.shape()[1]) {
        return Err(Error::invalid(format!("target {bad} outside the vocabulary")));
    }
    logits.index_rows(&rows)?.log_softmax_last()?.pick(&tgt)?.mean()?.neg()
}

pub fn understanding_loss<T: Real>(out: &BackboneOut<T>, layout: &SequenceLayout) -> Result<Var<T>> {
    masked_cross_entropy(&out.logits, &layout.text_targets())
}

/// EOS logit at every audio-patch position, `[K]`.
pub fn eos_logits<T: Real>(s: &Session<T>, out: &BackboneOut<T>, layout: &SequenceLayout) -> Result<Var<T>> {
    let pos = layout.audio_positions();
    let k = pos.len();
    nn::linear(s, "ar.eos", &out.hidden.index_rows(&pos)?)?.reshape(&[k])
}

/// Binary cross-entropy of `[K]` logits (clipped to ±20) against labels.
pub fn eos_loss<T: Real>(logits: &Var<T>, labels: &[f64]) -> Result<Var<T>> {
    if logits.numel() != labels.len() || labels.is_empty() {
        return Err(Error::shape("eos_loss", format!("{} logits for {} labels", logits.numel(), labels.len())));
    }
    let l = logits.reshape(&[labels.len()])?.clamp(-EOS_LOGIT_CLIP, EOS_LOGIT_CLIP)?;
    let y = Var::constant(Tensor::new(vec![labels.len()], labels.iter().map(|&v| T::from_f64(v)).collect())?);
    l.softplus()?.sub(&l.mul(&y)?)?.mean()
}

/// Backbone state conditioning each audio patch: the state at the stream
/// position just before it, which has seen only earlier patches. `[K, width]`.
pub fn patch_states<T: Real>(out: &BackboneOut<T>, layout: &SequenceLayout) -> Result<Var<T>> {
    let rows: Vec<usize> = layout.audio_positions().iter().map(|&p| p - 1).collect();
    out.hidden.index_rows(&rows)
}

/// History visible to the DiT for a batch of patches: for each patch,
/// `window` backbone states and `window` previous clean patches, by row.
pub struct DitContext<T: Real> {
    /// `[M, width]` backbone states.
    pub states: Var<T>,
    /// `[M', P * d]` clean previous patches (may have zero rows).
    pub prev: Option<Var<T>>,
    pub state_slots: Vec<Option<usize>>,
    pub prev_slots: Vec<Option<usize>>,
}

/// Slots of patch `k`: states `k - W + 1 ..= k`, patches `k - W .. k`.
pub fn slots_for(k: usize, window: usize) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let state = (0..window).map(|j| (k + j + 1).checked_sub(window)).collect();
    let prev = (0..window).map(|j| (k + j).checked_sub(window)).collect();
    (state, prev)
}

impl<T: Real> DitContext<T> {
    /// Teacher-forced context for all `K` patches at once.
    pub fn teacher_forced(cfg: &UnifiedConfig, states: Var<T>, patches: &Var<T>) -> Result<Self> {
        let k = patches.shape()[0];
        let prev = patches.reshape(&[k, cfg.patch * cfg.latent_dim])?;
        let (mut ss, mut ps) = (Vec::new(), Vec::new());
        for i in 0..k {
            let (a, b) = slots_for(i, cfg.dit_window);
            ss.extend(a);
            ps.extend(b);
        }
        Ok(Self { states, prev: Some(prev), state_slots: ss, prev_slots: ps })
    }
}

/// Projects `rows` with `prefix`, then gathers `[K, window, Wd]` by slot;
/// empty slots read a zero row.
fn gather_slots<T: Real>(
    s: &Session<T>,
    prefix: &str,
    rows: Option<&Var<T>>,
    slots: &[Option<usize>],
    k: usize,
    window: usize,
    wd: usize,
) -> Result<Var<T>> {
    let zero = Var::constant(Tensor::zeros(vec![1, wd]));
    let (table, n) = match rows {
        Some(r) if r.shape()[0] > 0 => {
            let n = r.shape()[0];
            (concat(&[nn::linear(s, prefix, r)?, zero], 0)?, n)
        }
        _ => (zero, 0),
    };
    let mut idx = Vec::with_capacity(k * window * wd);
    for slot in slots {
        let row = match slot {
            Some(i) if *i < n => *i,
            Some(i) => return Err(Error::shape("dit", format!("slot {i} beyond {n} history rows"))),
            None => n,
        };
        idx.extend(row * wd..(row + 1) * wd);
    }
    table.gather(Rc::new(idx), &[k, window, wd])
}

/// Velocity `[K, P, d]` for noisy patches `z_t: [K, P, d]` at times `t`.
pub fn dit_velocity<T: Real>(
    s: &Session<T>,
    cfg: &UnifiedConfig,
    ctx: &DitContext<T>,
    z_t: &Var<T>,
    t: &[f64],
) -> Result<Var<T>> {
    let (p, wd, win) = (cfg.patch, cfg.dit_width, cfg.dit_window);
    let k = z_t.shape()[0];
    if z_t.shape() != [k, p, cfg.latent_dim] || t.len() != k {
        return Err(Error::shape("dit", format!("z_t {:?} with {} times", z_t.shape(), t.len())));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("flow time {bad} outside [0, 1]")));
    }
    if ctx.state_slots.len() != k * win || ctx.prev_slots.len() != k * win {
        return Err(Error::shape("dit", "slot table does not match the patch count".to_string()));
    }
    let hs = gather_slots(s, "dit.hproj", Some(&ctx.states), &ctx.state_slots, k, win, wd)?;
    let zs = gather_slots(s, "dit.zproj", ctx.prev.as_ref(), &ctx.prev_slots, k, win, wd)?;
    let prefix = concat(&[hs, zs], 1)?.add(&s.p("dit.slot")?)?;
    let q = nn::linear(s, "dit.in", z_t)?.add(&s.p("dit.pos")?)?;
    let mut x = concat(&[prefix, q], 1)?;
    let n_pre = 2 * win;
    let steps = n_pre + p;

    let temb: Vec<f64> = t.iter().map(|v| v * 1000.0).collect();
    let temb = Var::constant(Tensor::from_f64(&nn::sinusoidal(&temb, wd)));
    let c = nn::linear(s, "dit.time.fc2", &nn::linear(s, "dit.time.fc1", &temb)?.gelu()?)?.gelu()?;
    // prefix tokens see only the prefix; patch tokens see everything
    let mask: Rc<Vec<bool>> = Rc::new((0..steps * steps).map(|i| i / steps >= n_pre || i % steps < n_pre).collect());
    let modulate = |x: &Var<T>, m: &Var<T>, i: usize| -> Result<Var<T>> {
        let shift = m.narrow(2, i * wd, wd)?;
        let scale = m.narrow(2, (i + 1) * wd, wd)?;
        x.layer_norm_last(1e-6)?.mul(&scale.add_scalar(1.0)?)?.add(&shift)
    };
    for l in 0..cfg.dit_layers {
        let b = format!("dit.block{l}");
        let m = nn::linear(s, &format!("{b}.ada"), &c)?.reshape(&[k, 1, 6 * wd])?;
        let h = modulate(&x, &m, 0)?;
        let a = nn::self_attention(s, &format!("{b}.attn"), &h, cfg.dit_heads, Some(mask.clone()))?;
        x = x.add(&a.mul(&m.narrow(2, 2 * wd, wd)?)?)?;
        let h = modulate(&x, &m, 3)?;
        x = x.add(&nn::mlp(s, &format!("{b}.mlp"), &h)?.mul(&m.narrow(2, 5 * wd, wd)?)?)?;
    }
    let m = nn::linear(s, "dit.final.ada", &c)?.reshape(&[k, 1, 2 * wd])?;
    let h = modulate(&x, &m, 0)?.narrow(1, n_pre, p)?;
    nn::linear(s, "dit.out", &h)
}

/// Per-patch flow-matching error: the squared velocity error summed over
/// the real frames of each patch, `[K]`, and the number of real values.
///
/// `patches: [K, P, d]`, `mask: [K * P]`, `eps: [K, P, d]`.
pub fn fm_terms<T: Real>(
    s: &Session<T>,
    cfg: &UnifiedConfig,
    ctx: &DitContext<T>,
    patches: &Var<T>,
    mask: &[bool],
    t: &[f64],
    eps: &Tensor<T>,
) -> Result<(Var<T>, usize)> {
    let (k, p, d) = (patches.shape()[0], cfg.patch, cfg.latent_dim);
    if mask.len() != k * p || eps.shape() != patches.shape() {
        return Err(Error::shape("fm_loss", format!("mask {} / eps {:?} for {:?}", mask.len(), eps.shape(), patches.shape())));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("flow time {bad} outside [0, 1]")));
    }
    let tt = Var::constant(Tensor::new(vec![k, 1, 1], t.iter().map(|&v| T::from_f64(v)).collect())?);
    let eps = Var::constant(eps.clone());
    // z_t = (1 - t) eps + t z, target velocity z - eps
    let z_t = eps.add(&patches.sub(&eps)?.mul(&tt)?)?;
    let u = patches.sub(&eps)?;
    let v = dit_velocity(s, cfg, ctx, &z_t, t)?;
    let m = Var::constant(Tensor::new(vec![k, p, 1], mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?);
    let err = v.sub(&u)?.square()?.mul(&m)?.sum_axis(2)?.sum_axis(1)?;
    let count = mask.iter().filter(|&&b| b).count() * d;
    Ok((err, count))
}

/// Mean squared velocity error over real frames.
pub fn fm_loss<T: Real>(
    s: &Session<T>,
    cfg: &UnifiedConfig,
    ctx: &DitContext<T>,
    patches: &Var<T>,
    mask: &[bool],
    t: &[f64],
    eps: &Tensor<T>,
) -> Result<Var<T>> {
    let (err, count) = fm_terms(s, cfg, ctx, patches, mask, t, eps)?;
    if count == 0 {
        return Err(Error::invalid("flow-matching loss over zero frames"));
    }
    err.sum()?.scale(1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_parameters, CheckOptions};
    use crate::unified::layout::{build_layout, LayoutTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: PatchMode) -> UnifiedConfig {
        UnifiedConfig {
            patch: 2,
            latent_dim: 3,
            width: 16,
            layers: 1,
            heads: 2,
            patch_mode: mode,
            encoder_layers: 1,
            dit_width: 16,
            dit_layers: 1,
            dit_heads: 2,
            ..UnifiedConfig::default()
        }
    }

    fn latents(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        crate::codec::bottleneck::standard_normal(&[t, d], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn cross_entropy_cases() {
        let zeros = Var::<f64>::constant(Tensor::zeros(vec![3, 20]));
        let l = masked_cross_entropy(&zeros, &[Some(1), None, Some(19)]).unwrap().item();
        assert!((l - 20f64.ln()).abs() < 1e-12);
        let mut hot = Tensor::zeros(vec![2, 20]);
        hot.data_mut()[3] = 60.0;
        hot.data_mut()[20 + 7] = 60.0;
        let hot = Var::constant(hot);
        assert!(masked_cross_entropy(&hot, &[Some(3), Some(7)]).unwrap().item() < 1e-20);
        // changing what sits outside the span changes nothing
        let a = masked_cross_entropy(&hot, &[Some(3), None]).unwrap().item();
        let b = masked_cross_entropy(&hot.narrow(0, 0, 1).unwrap(), &[Some(3)]).unwrap().item();
        assert_eq!(a, b);
        assert!(masked_cross_entropy(&hot, &[None, None]).is_err());
    }

    #[test]
    fn eos_cases() {
        let perfect = Var::<f64>::constant(Tensor::new(vec![3], vec![-1e9, -1e9, 1e9]).unwrap());
        assert!(eos_loss(&perfect, &[0.0, 0.0, 1.0]).unwrap().item() < 1e-8);
        let zero = Var::<f64>::constant(Tensor::zeros(vec![4]));
        assert!((eos_loss(&zero, &[0.0, 1.0, 0.0, 1.0]).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        let logits = [0.3, -1.7, 2.2, 0.05];
        let labels = [1.0, 0.0, 0.0, 1.0];
        let direct: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&l, &y): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-l).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        let v = Var::<f64>::constant(Tensor::new(vec![4], logits.to_vec()).unwrap());
        assert!((eos_loss(&v, &labels).unwrap().item() - direct).abs() < 1e-12);
        assert!(eos_loss(&v, &labels[..3]).is_err());
    }

    #[test]
    fn fresh_model_is_uniform_and_zero_velocity() {
        let cfg = small(PatchMode::PatchEncoder);
        let ps = init_unified(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s: Session<f64> = Session::eval(&ps);
        let z = latents(7, 3, 1);
        let k = 4;
        let layout = build_layout(LayoutTask::Asr, &[1, 2, 3], k, &[]).unwrap();
        let audio = patch_encode(&s, &cfg, None, &Var::constant(z.clone())).unwrap();
        assert_eq!(audio.shape(), &[k, 16]);
        let out = backbone_forward(&s, &cfg, &layout, Some(&audio)).unwrap();
        let ce = understanding_loss(&out, &layout).unwrap().item();
        assert!((ce - (VOCAB as f64).ln()).abs() < 1e-12);

        // the zero-velocity predictor scores E||z - eps||^2 over real frames
        let seq = crate::unified::patch::patchify(&z, 2).unwrap();
        let tts = build_layout(LayoutTask::Tts, &[1, 2], k, &[]).unwrap();
        let out = backbone_forward(&s, &cfg, &tts, Some(&audio)).unwrap();
        let patches = Var::constant(seq.patches.clone());
        let ctx = DitContext::teacher_forced(&cfg, patch_states(&out, &tts).unwrap(), &patches).unwrap();
        let eps = latents(k * 2, 3, 2).reshape(vec![k, 2, 3]).unwrap();
        let t = [0.1, 0.5, 0.9, 0.0];
        let fm = fm_loss(&s, &cfg, &ctx, &patches, &seq.mask(), &t, &eps).unwrap().item();
        let mask = seq.mask();
        let direct: f64 = (0..k * 2)
            .filter(|&f| mask[f])
            .flat_map(|f| (0..3).map(move |j| f * 3 + j))
            .map(|i| (seq.patches.data()[i] - eps.data()[i]).powi(2))
            .sum::<f64>()
            / 21.0;
        assert!((fm - direct).abs() < 1e-12);
        assert!(fm_loss(&s, &cfg, &ctx, &patches, &mask, &[0.1, 0.5, 1.5, 0.0], &eps).is_err());
    }

    #[test]
    fn mean_pool_linear_identity() {
        let mut ps = ParameterSet::new();
        let mut eye = Tensor::zeros(vec![3, 3]);
        (0..3).for_each(|i| eye.data_mut()[i * 4] = 1.0);
        ps.insert("penc.proj.weight", eye).unwrap();
        ps.insert("penc.proj.bias", Tensor::zeros(vec![3])).unwrap();
        let s: Session<f64> = Session::eval(&ps);
        let row = [0.5, -1.0, 2.0];
        let feats = Var::constant(Tensor::new(vec![6, 3], row.repeat(6)).unwrap());
        let e = mean_pool_linear(&s, &feats, 4).unwrap();
        assert_eq!(e.shape(), &[2, 3]);
        for r in 0..2 {
            for j in 0..3 {
                assert!((e.data()[r * 3 + j] - row[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backbone_is_causal() {
        let cfg = small(PatchMode::PatchEncoder);
        let ps = init_unified(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ps2 = ps.clone();
        ps2.randomize_zero_weights(0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let s: Session<f64> = Session::eval(&ps2);
        let layout = build_layout(LayoutTask::Asr, &[1, 2, 3], 4, &[]).unwrap();
        let audio = Var::constant(latents(4, 16, 5));
        let base = backbone_forward(&s, &cfg, &layout, Some(&audio)).unwrap();
        for k in 0..4 {
            let mut moved = audio.value().clone();
            moved.data_mut()[k * 16..(k + 1) * 16].iter_mut().for_each(|v| *v += 0.5);
            let out = backbone_forward(&s, &cfg, &layout, Some(&Var::constant(moved))).unwrap();
            let pos = layout.audio_positions()[k];
            let v = layout.len();
            assert_eq!(&out.logits.data()[..pos * v], &base.logits.data()[..pos * v]);
            assert_ne!(&out.logits.data()[pos * v..], &base.logits.data()[pos * v..]);
        }
    }

    #[test]
    fn gradient_through_patch_encoder_and_backbone() {
        let cfg = small(PatchMode::PatchEncoder);
        let mut ps = init_unified(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        ps.randomize_zero_weights(0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let z = latents(5, 3, 8);
        let layout = build_layout(LayoutTask::Asr, &[4, 1], 3, &[]).unwrap();
        let names: Vec<String> = ["penc.in.weight", "penc.block0.attn.q.weight", "ar.block0.mlp.fc1.weight", "ar.head.weight", "ar.embed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let report = check_parameters(
            &ps,
            &names,
            |s| {
                let audio = patch_encode(s, &cfg, None, &Var::constant(z.clone()))?;
                let out = backbone_forward(s, &cfg, &layout, Some(&audio))?;
                understanding_loss(&out, &layout)
            },
            CheckOptions { tol: 1e-3, ..CheckOptions::default() },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err());
    }
}
