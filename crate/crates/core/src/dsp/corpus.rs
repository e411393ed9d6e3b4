//! Procedurally generated labeled tone corpus.
//!
//! Each utterance is a sequence of harmonic tones, one per symbol, with
//! raised-cosine envelopes and a little low-passed noise. The transcript is
//! the symbol sequence and the class label says whether the mean symbol is
//! in the upper half of the vocabulary.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of pitch symbols.
pub const N_SYMBOLS: usize = 16;
/// Class label ids share the symbol id space.
pub const LABEL_LOW: u32 = 16;
pub const LABEL_HIGH: u32 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Transcribe,
    Classify,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Transcribe, Task::Classify];

    pub fn index(self) -> usize {
        match self {
            Task::Transcribe => 0,
            Task::Classify => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Standard deviation of the low-passed background noise.
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            min_seconds: 1.0,
            max_seconds: 1.0,
            min_segments: 3,
            max_segments: 6,
            noise: 0.01,
        }
    }
}

impl CorpusConfig {
    pub fn clean(mut self) -> Self {
        self.noise = 0.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub transcript: Vec<u32>,
    pub labels: BTreeMap<Task, Vec<u32>>,
}

impl Utterance {
    pub fn target(&self, task: Task) -> &[u32] {
        &self.labels[&task]
    }
}

/// Fundamental frequency of symbol `s`: semitone steps from 200 Hz.
pub fn symbol_pitch(s: u32) -> f64 {
    200.0 * 2f64.powf(s as f64 / 12.0)
}

const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];

pub fn class_label(transcript: &[u32]) -> u32 {
    let mean = transcript.iter().map(|&s| s as f64).sum::<f64>() / transcript.len() as f64;
    if mean >= N_SYMBOLS as f64 / 2.0 {
        LABEL_HIGH
    } else {
        LABEL_LOW
    }
}

/// Written form of the symbols: one hex digit each.
pub const SYMBOL_CHARS: &str = "0123456789abcdef";

/// Parses a transcript written in [`SYMBOL_CHARS`]; case-insensitive,
/// whitespace ignored.
pub fn parse_symbols(text: &str) -> Result<Vec<u32>> {
    let out: Vec<u32> = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| {
            c.to_digit(16)
                .ok_or_else(|| Error::invalid(format!("`{c}` is not a symbol (expected one of {SYMBOL_CHARS})")))
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::invalid("empty transcript"));
    }
    Ok(out)
}

/// Inverse of [`parse_symbols`]; ids outside the symbol set print as `?`.
pub fn format_symbols(symbols: &[u32]) -> String {
    symbols.iter().map(|&s| SYMBOL_CHARS.chars().nth(s as usize).unwrap_or('?')).collect()
}

fn generate_one(seed: u64, index: usize, cfg: &CorpusConfig) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let sr = cfg.sample_rate as f64;
    let secs = if cfg.max_seconds > cfg.min_seconds {
        rng.random_range(cfg.min_seconds..=cfg.max_seconds)
    } else {
        cfg.min_seconds
    };
    let len = ((secs * sr).round() as usize).max(1);
    let n_seg = rng.random_range(cfg.min_segments..=cfg.max_segments);
    let transcript: Vec<u32> = (0..n_seg).map(|_| rng.random_range(0..N_SYMBOLS as u32)).collect();
    let amp: f64 = rng.random_range(0.3..0.6);
    let mut samples = vec![0.0; len];
    let ramp = (0.01 * sr) as usize;
    for (k, &s) in transcript.iter().enumerate() {
        let (start, end) = (k * len / n_seg, (k + 1) * len / n_seg);
        let seg = end - start;
        let f0 = symbol_pitch(s);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        for n in 0..seg {
            let env = raised_cosine(n, seg, ramp);
            let t = n as f64 / sr;
            let v: f64 = HARMONICS
                .iter()
                .enumerate()
                .map(|(h, &a)| a * (2.0 * PI * f0 * (h + 1) as f64 * t + phase * (h + 1) as f64).sin())
                .sum();
            samples[start + n] = amp * env * v / 1.75;
        }
    }
    if cfg.noise > 0.0 {
        // one-pole low-pass over white noise
        let mut state = 0.0;
        for s in samples.iter_mut() {
            let w: f64 = rng.random_range(-1.0..1.0) * cfg.noise * 3f64.sqrt();
            state = 0.8 * state + 0.2 * w;
            *s += state * 2.5;
        }
    }
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    let mut labels = BTreeMap::new();
    labels.insert(Task::Transcribe, transcript.clone());
    labels.insert(Task::Classify, vec![class_label(&transcript)]);
    Utterance {
        id: format!("utt{index:05}"),
        samples,
        sample_rate: cfg.sample_rate,
        transcript,
        labels,
    }
}

fn raised_cosine(n: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    if n < ramp {
        0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
    } else if n >= len - ramp {
        0.5 - 0.5 * (PI * (len - 1 - n) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

/// Worker count from `HOLITOK_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("HOLITOK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Generates `n` utterances. Each utterance draws from its own stream of
/// the seeded generator, so the result does not depend on `workers`.
pub fn synth_corpus_with(seed: u64, n: usize, cfg: &CorpusConfig, workers: usize) -> Result<Vec<Utterance>> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be positive"));
    }
    if cfg.min_segments == 0 || cfg.min_segments > cfg.max_segments || cfg.min_seconds <= 0.0 {
        return Err(Error::Config(format!("invalid corpus config {cfg:?}")));
    }
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return Ok((0..n).map(|i| generate_one(seed, i, cfg)).collect());
    }
    let mut out: Vec<Option<Utterance>> = vec![None; n];
    std::thread::scope(|scope| {
        for (w, chunk) in out.chunks_mut(n.div_ceil(workers)).enumerate() {
            let base = w * n.div_ceil(workers);
            scope.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(generate_one(seed, base + j, cfg));
                }
            });
        }
    });
    Ok(out.into_iter().map(|u| u.expect("every slot filled")).collect())
}

pub fn synth_corpus(seed: u64, n: usize, cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    synth_corpus_with(seed, n, cfg, worker_count())
}

/// Reference detector: for each equal-length segment, the symbol whose
/// harmonic comb carries the most energy.
pub fn detect_symbols(samples: &[f64], sample_rate: u32, n_segments: usize) -> Vec<u32> {
    let len = samples.len();
    let sr = sample_rate as f64;
    (0..n_segments)
        .map(|k| {
            let seg = &samples[k * len / n_segments..(k + 1) * len / n_segments];
            (0..N_SYMBOLS as u32)
                .map(|s| {
                    let e: f64 = (1..=HARMONICS.len())
                        .map(|h| tone_power(seg, symbol_pitch(s) * h as f64, sr))
                        .sum();
                    (s, e)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(s, _)| s)
                .unwrap()
        })
        .collect()
}

/// Power of the Hann-windowed DFT of `x` at frequency `f`.
fn tone_power(x: &[f64], f: f64, sr: f64) -> f64 {
    let n = x.len();
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
        let ph = 2.0 * PI * f * i as f64 / sr;
        re += w * v * ph.cos();
        im -= w * v * ph.sin();
    }
    re * re + im * im
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    file: String,
    transcript: Vec<u32>,
    labels: BTreeMap<Task, Vec<u32>>,
    sample_rate: u32,
    samples: usize,
}

/// Writes `<id>.f32` little-endian PCM files plus `manifest.json`.
pub fn export_corpus(corpus: &[Utterance], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(corpus.len());
    for u in corpus {
        let file = format!("{}.f32", u.id);
        write_pcm(&dir.join(&file), &u.samples)?;
        manifest.push(ManifestEntry {
            id: u.id.clone(),
            file,
            transcript: u.transcript.clone(),
            labels: u.labels.clone(),
            sample_rate: u.sample_rate,
            samples: u.samples.len(),
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn import_corpus(dir: &Path) -> Result<Vec<Utterance>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    manifest
        .into_iter()
        .map(|m| {
            let samples = read_pcm(&dir.join(&m.file))?;
            if samples.len() != m.samples {
                return Err(Error::Truncated {
                    expected: (m.samples * 4) as u64,
                    available: (samples.len() * 4) as u64,
                });
            }
            Ok(Utterance {
                id: m.id,
                samples,
                sample_rate: m.sample_rate,
                transcript: m.transcript,
                labels: m.labels,
            })
        })
        .collect()
}

pub fn write_pcm(path: &Path, samples: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pcm(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated {
            expected: bytes.len().div_ceil(4) as u64 * 4,
            available: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_text_round_trip() {
        assert_eq!(parse_symbols("3 1 4F").unwrap(), vec![3, 1, 4, 15]);
        assert_eq!(format_symbols(&[3, 1, 4, 15, 16]), "314f?");
        assert!(parse_symbols("3g").is_err());
        assert!(parse_symbols(" ").is_err());
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let cfg = CorpusConfig::default();
        let a = synth_corpus_with(7, 5, &cfg, 1).unwrap();
        let b = synth_corpus_with(7, 5, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus_with(8, 5, &cfg, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_present_and_consistent() {
        for u in synth_corpus_with(3, 20, &CorpusConfig::default(), 1).unwrap() {
            assert!((3..=6).contains(&u.transcript.len()));
            assert_eq!(u.target(Task::Transcribe), &u.transcript[..]);
            assert_eq!(u.target(Task::Classify), &[class_label(&u.transcript)]);
            assert_eq!(u.samples.len(), 8000);
            assert!(u.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn detector_recovers_clean_transcripts() {
        for u in synth_corpus_with(11, 40, &CorpusConfig::default().clean(), 1).unwrap() {
            assert_eq!(detect_symbols(&u.samples, u.sample_rate, u.transcript.len()), u.transcript);
        }
    }

    #[test]
    fn zero_size_rejected() {
        assert!(synth_corpus_with(0, 0, &CorpusConfig::default(), 1).is_err());
    }
}
