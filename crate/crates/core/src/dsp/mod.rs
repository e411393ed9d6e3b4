//! Spectral analysis, the multi-scale mel loss and the synthetic corpus.

pub mod corpus;
pub mod mel;

pub use corpus::{synth_corpus, CorpusConfig, Task, Utterance};
pub use mel::{log_mel, mel_distance, mel_project, multiscale_mel_loss, stft_magnitude, MelConfig};
