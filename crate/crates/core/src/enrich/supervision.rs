//! Task-conditioned supervision network: a small transformer over latents
//! and a causal decoder predicting the task target.

use rand::Rng;

use super::EnrichConfig;
use crate::dsp::corpus::Task;
use crate::error::{Error, Result};
use crate::numerics::nn;
use crate::numerics::{concat, ParameterSet, Real, Session, Tensor, Var};

/// Begin-of-target and end-of-target ids, at the top of the vocabulary.
pub fn bos(cfg: &EnrichConfig) -> usize {
    cfg.vocab - 2
}

pub fn eos(cfg: &EnrichConfig) -> usize {
    cfg.vocab - 1
}

pub fn init_supervision(ps: &mut ParameterSet, cfg: &EnrichConfig, d_z: usize, rng: &mut impl Rng) -> Result<()> {
    let w = cfg.sup_width;
    nn::init_linear(ps, "sup.enc.in", d_z, w, rng)?;
    for l in 0..cfg.sup_layers {
        nn::init_block(ps, &format!("sup.enc.block{l}"), w, rng)?;
    }
    nn::init_layer_norm(ps, "sup.enc.norm", w)?;
    ps.init_normal("sup.task", &[Task::ALL.len(), w], 0.02, rng)?;
    ps.init_normal("sup.dec.embed", &[cfg.vocab, w], 0.02, rng)?;
    for l in 0..cfg.sup_layers {
        nn::init_block(ps, &format!("sup.dec.block{l}"), w, rng)?;
    }
    nn::init_layer_norm(ps, "sup.dec.norm", w)?;
    // zero read-out: a fresh net predicts the uniform distribution
    nn::init_linear_zero(ps, "sup.dec.out", w, cfg.vocab)
}

/// Encodes `[T, d_z]` latents to `[T, width]` features. With
/// `cfg.causal_encoder` each output frame sees only earlier frames.
pub fn encode_latents<T: Real>(s: &Session<T>, cfg: &EnrichConfig, z: &Var<T>) -> Result<Var<T>> {
    let &[t, _] = z.shape() else {
        return Err(Error::shape("supervision encoder", format!("latents must be [T, d], got {:?}", z.shape())));
    };
    let w = cfg.sup_width;
    let mut h = nn::linear(s, "sup.enc.in", z)?
        .add(&nn::positions(t, w))?
        .reshape(&[1, t, w])?;
    let mask = cfg.causal_encoder.then(|| nn::causal_mask(t));
    for l in 0..cfg.sup_layers {
        h = nn::block(s, &format!("sup.enc.block{l}"), &h, cfg.heads, mask.clone())?;
    }
    nn::layer_norm(s, "sup.enc.norm", &h)?.reshape(&[t, w])
}

fn check_targets(cfg: &EnrichConfig, y: &[u32]) -> Result<()> {
    if let Some(&bad) = y.iter().find(|&&v| v as usize >= bos(cfg)) {
        return Err(Error::invalid(format!(
            "symbol {bad} outside the target vocabulary of {}",
            bos(cfg)
        )));
    }
    Ok(())
}

/// Next-symbol logits `[n + 1, vocab]` for the target `y` (teacher forcing)
/// after the prefix `[task; encoded latents]`.
pub fn supervision_logits<T: Real>(
    s: &Session<T>,
    cfg: &EnrichConfig,
    z: &Var<T>,
    task: Task,
    y: &[u32],
) -> Result<Var<T>> {
    check_targets(cfg, y)?;
    let w = cfg.sup_width;
    let enc = encode_latents(s, cfg, z)?;
    let task_row = s.p("sup.task")?.index_rows(&[task.index()])?;
    let mut ids = vec![bos(cfg)];
    ids.extend(y.iter().map(|&v| v as usize));
    let tok = s.p("sup.dec.embed")?.index_rows(&ids)?;
    let prefix = enc.shape()[0] + 1;
    let n = prefix + ids.len();
    let seq = concat(&[task_row, enc, tok], 0)?.add(&nn::positions(n, w))?;
    let mut h = seq.reshape(&[1, n, w])?;
    for l in 0..cfg.sup_layers {
        h = nn::block(s, &format!("sup.dec.block{l}"), &h, cfg.heads, Some(nn::causal_mask(n)))?;
    }
    let h = nn::layer_norm(s, "sup.dec.norm", &h)?
        .reshape(&[n, w])?
        .narrow(0, prefix, ids.len())?;
    nn::linear(s, "sup.dec.out", &h)
}

/// Teacher-forced cross-entropy of `y` followed by the end symbol, mean
/// over target positions. `z: [T, d_z]`.
pub fn supervision_loss<T: Real>(s: &Session<T>, cfg: &EnrichConfig, z: &Var<T>, task: Task, y: &[u32]) -> Result<Var<T>> {
    let logits = supervision_logits(s, cfg, z, task, y)?;
    let mut targets: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    targets.push(eos(cfg));
    logits.log_softmax_last()?.pick(&targets)?.mean()?.neg()
}

/// Greedy decode of the task target, up to `max_len` symbols.
pub fn supervision_decode(s: &Session<f64>, cfg: &EnrichConfig, z: &Tensor<f64>, task: Task, max_len: usize) -> Result<Vec<u32>> {
    let zv = Var::constant(z.clone());
    let mut y = Vec::new();
    for _ in 0..max_len {
        let logits = supervision_logits(s, cfg, &zv, task, &y)?;
        let last = logits.value().row(y.len());
        let (best, _) = last
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        if best >= bos(cfg) {
            break;
        }
        y.push(best as u32);
    }
    Ok(y)
}
