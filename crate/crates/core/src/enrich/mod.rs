//! Latent enrichment: distillation from frozen teachers and task
//! supervision through a small language-model head.

pub mod supervision;
pub mod teachers;

use serde::{Deserialize, Serialize};

pub use supervision::{init_supervision, supervision_decode, supervision_loss};
pub use teachers::{align_frames, distill_loss, frame_teacher, init_heads, utterance_teacher, DistillTerms, TeacherBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichConfig {
    pub teacher_seed: u64,
    pub frame_dim: usize,
    pub utt_dim: usize,
    pub lambda_frame: f64,
    pub lambda_utt: f64,
    pub lambda_sup: f64,
    pub sup_width: usize,
    pub sup_layers: usize,
    pub heads: usize,
    /// Target symbols plus begin and end markers.
    pub vocab: usize,
    pub causal_encoder: bool,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            teacher_seed: 7,
            frame_dim: 32,
            utt_dim: 16,
            lambda_frame: 1.0,
            lambda_utt: 1.0,
            lambda_sup: 1.0,
            sup_width: 64,
            sup_layers: 2,
            heads: 4,
            vocab: 20,
            causal_encoder: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::corpus::Task;
    use crate::numerics::{ParameterSet, Session, Tensor, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(n: usize) -> Var<f64> {
        Var::constant(Tensor::new(vec![1, n], (0..n).map(|i| (i as f64 * 0.07).sin() * 0.4).collect()).unwrap())
    }

    #[test]
    fn frame_teacher_rate_and_determinism() {
        let t = TeacherBundle::new(EnrichConfig::default()).unwrap();
        let s: Session<f64> = Session::eval(&t.params);
        let a = frame_teacher(&s, &sine(8000)).unwrap();
        assert_eq!(a.shape(), &[1, 50, 32]);
        let b = frame_teacher(&s, &sine(8000)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn alignment_cases() {
        let z = Var::constant(Tensor::new(vec![5, 1], vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap());
        let y = align_frames(&z, 9).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            assert!((v - i as f64 / 8.0).abs() < 1e-15);
        }
        assert_eq!(align_frames(&z, 5).unwrap().data(), z.data());
        let c = Var::constant(Tensor::filled(vec![1, 7, 3], 0.3f64));
        assert!(align_frames(&c, 11).unwrap().data().iter().all(|&v| v == 0.3));
        assert!(align_frames(&c, 0).is_err());
    }

    #[test]
    fn uniform_supervision_baseline_and_vocab_check() {
        let cfg = EnrichConfig::default();
        let mut ps = ParameterSet::new();
        init_supervision(&mut ps, &cfg, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s: Session<f64> = Session::eval(&ps);
        let z = Var::constant(Tensor::filled(vec![6, 8], 0.1));
        let l = supervision_loss(&s, &cfg, &z, Task::Transcribe, &[1, 2, 3]).unwrap();
        assert!((l.item() - 20f64.ln()).abs() < 1e-12);
        assert!(supervision_loss(&s, &cfg, &z, Task::Classify, &[19]).is_err());
    }
}
