//! AdamW with global-norm clipping, and the learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold.
    pub clip: f64,
}

impl AdamWConfig {
    /// Tokenizer optimizer.
    pub fn tokenizer() -> Self {
        Self { beta1: 0.8, beta2: 0.99, eps: 1e-6, weight_decay: 0.01, clip: 500.0 }
    }

    /// Downstream AR + DiT optimizer.
    pub fn downstream() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-6, weight_decay: 0.01, clip: 2.0 }
    }
}

/// Moment accumulators for the parameters that have been updated.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Global L2 norm over the gradients of trainable parameters.
pub fn grad_norm(params: &ParameterSet, grads: &BTreeMap<String, Tensor<f64>>) -> f64 {
    grads
        .iter()
        .filter(|(n, _)| !params.is_frozen(n))
        .map(|(_, g)| g.sum_sq())
        .sum::<f64>()
        .sqrt()
}

/// One decoupled-weight-decay Adam update at learning rate `lr`. Gradients
/// are first rescaled so their global norm is at most `cfg.clip`. Frozen
/// parameters and parameters without a gradient are left untouched and get
/// no moments. Returns the pre-clip gradient norm.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor<f64>>,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<f64> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::TensorShape { name: name.clone(), expected: p.shape().to_vec(), found: g.shape().to_vec() });
        }
    }
    let norm = grad_norm(params, grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient".into() });
    }
    let scale = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        if params.is_frozen(name) {
            continue;
        }
        let n = g.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let p = params.get_mut(name)?.data_mut();
        for i in 0..n {
            let gi = g.data()[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            p[i] *= 1.0 - lr * cfg.weight_decay;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: format!("update of `{name}`") });
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `max(lr0 * gamma^step, floor)`.
    ExpDecay { lr0: f64, gamma: f64, floor: f64 },
    /// Linear warmup from zero, then half-cosine down to `min_lr` at `total`.
    Cosine { lr0: f64, warmup: u64, total: u64, min_lr: f64 },
}

impl LrSchedule {
    pub fn tokenizer() -> Self {
        LrSchedule::ExpDecay { lr0: 1e-4, gamma: 0.9999996, floor: 1e-6 }
    }

    pub fn downstream(total: u64) -> Self {
        LrSchedule::Cosine { lr0: 1e-4, warmup: 5000, total, min_lr: 1e-5 }
    }

    pub fn at(&self, step: i64) -> Result<f64> {
        if step < 0 {
            return Err(Error::invalid(format!("negative step {step}")));
        }
        let step = step as u64;
        Ok(match *self {
            LrSchedule::ExpDecay { lr0, gamma, floor } => (lr0 * gamma.powf(step as f64)).max(floor),
            LrSchedule::Cosine { lr0, warmup, total, min_lr } => {
                if step < warmup {
                    lr0 * step as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1);
                    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                    min_lr + 0.5 * (lr0 - min_lr) * (1.0 + (PI * progress).cos())
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        ps
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = scalar_set(0.7);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::tokenizer() };
        adamw_step(&mut ps, &grad(0.0), &mut OptimizerState::new(), &cfg, 1e-3).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_matches_recursion() {
        let cfg = AdamWConfig::tokenizer();
        let (p0, g, lr) = (0.3, -0.25, 1e-3);
        let mut ps = scalar_set(p0);
        adamw_step(&mut ps, &grad(g), &mut OptimizerState::new(), &cfg, lr).unwrap();
        let m = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let expect = p0 * (1.0 - lr * cfg.weight_decay) - lr * m / (v.sqrt() + cfg.eps);
        assert!((ps.get("w").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_untouched_and_clip_applies() {
        let mut ps = scalar_set(1.0);
        ps.freeze("w");
        let mut st = OptimizerState::new();
        adamw_step(&mut ps, &grad(5.0), &mut st, &AdamWConfig::tokenizer(), 1e-2).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.0]);
        assert!(st.m.is_empty());
    }

    #[test]
    fn schedules() {
        let e = LrSchedule::tokenizer();
        assert_eq!(e.at(0).unwrap(), 1e-4);
        // 0.9999996^1e7 = exp(-4.0000008): still above the floor
        let v = e.at(10_000_000).unwrap();
        assert!((v - 1e-4 * (1e7 * 0.9999996f64.ln()).exp()).abs() < 1e-15 && v > 1.8e-6);
        assert_eq!(e.at(20_000_000).unwrap(), 1e-6);
        assert!(e.at(-1).is_err());
        let c = LrSchedule::Cosine { lr0: 1e-4, warmup: 100, total: 1000, min_lr: 1e-5 };
        assert_eq!(c.at(100).unwrap(), 1e-4);
        assert!((c.at(99).unwrap() - 0.99e-4).abs() < 1e-18);
        assert!((c.at(1000).unwrap() - 1e-5).abs() < 1e-18);
    }
}
