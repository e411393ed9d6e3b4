//! Self-verification harness: gradient, causality, KL and fidelity-bound
//! suites plus the remaining module invariants, collected into a JSON
//! report with one verdict per check.

pub mod checks;
pub mod primitives;

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::codec::{Codec, ProbeOptions};
use crate::dsp::corpus::{synth_corpus, CorpusConfig};
use crate::enrich::EnrichConfig;
use crate::error::{Error, Result};
use crate::pipeline::stages::{run_stage, Stage, StagePlan, Tokenizer};
use crate::pipeline::TrainConfig;

/// Relative tolerance of the primitive gradient suites.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Relative tolerance of the composite Stage-III gradient check.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Causality,
    Kl,
    Bound,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gradients" => Suite::Gradients,
            "causality" => Suite::Causality,
            "kl" => Suite::Kl,
            "bound" => Suite::Bound,
            "all" => Suite::All,
            other => return Err(Error::Config(format!("unknown verify suite `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Adds forward-only shape and causality checks at full scale.
    pub paper_preset: bool,
    pub primitive_seeds: u64,
    pub composite_seeds: u64,
    pub kl_posteriors: usize,
    pub kl_draws: usize,
    /// Toy tokenizer trained through Stage II for the fidelity bound. When
    /// absent one is trained with the default toy configuration.
    pub tokenizer: Option<PathBuf>,
    pub bound_utterances: usize,
    pub bound_probes: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            paper_preset: false,
            primitive_seeds: 20,
            composite_seeds: 3,
            kl_posteriors: 50,
            kl_draws: 10_000,
            tokenizer: None,
            bound_utterances: 100,
            bound_probes: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub seconds: f64,
    pub details: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub checks: Vec<CheckOutcome>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn failed(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Runs one check, turning an error into a failed outcome that carries
/// the message.
pub fn run_check(name: &str, f: impl FnOnce() -> checks::Verdict) -> CheckOutcome {
    let start = Instant::now();
    let (pass, details) = match f() {
        Ok(v) => v,
        Err(e) => (false, json!({ "error": e.to_string() })),
    };
    CheckOutcome { name: name.to_string(), pass, seconds: start.elapsed().as_secs_f64(), details }
}

/// Trains a toy tokenizer through Stages I and II with the default
/// configuration.
pub fn train_toy_vae(seed: u64) -> Result<Tokenizer> {
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let corpus = synth_corpus(cfg.corpus_seed, cfg.corpus_size, &CorpusConfig::default())?;
    let mut tok = Tokenizer::new(&cfg.preset, EnrichConfig::default(), seed)?;
    for stage in [Stage::I, Stage::II] {
        let plan = StagePlan::new(stage, cfg.steps_for(stage.number()), &cfg.loss_weights, &cfg.ablation);
        run_stage(&mut tok, &plan, &corpus, &cfg)?;
    }
    Ok(tok)
}

fn gradients(opts: &VerifyOptions, out: &mut Sink<'_>) {
    for (name, build) in primitives::cases() {
        out.push(run_check(&format!("gradients.{name}"), || {
            let r = primitives::check_primitive(name, build, opts.primitive_seeds, PRIMITIVE_TOL)?;
            Ok((r.pass, serde_json::to_value(&r)?))
        }));
    }
    out.push(run_check("gradients.stage3_composite", || checks::composite_gradient(opts.composite_seeds, COMPOSITE_TOL)));
}

fn causality(opts: &VerifyOptions, out: &mut Sink<'_>) {
    out.push(run_check("causality.toy_codec", || {
        let codec = Codec::toy();
        checks::codec_causality(&codec, &ProbeOptions::exhaustive(&codec), opts.seed, false)
    }));
    if opts.paper_preset {
        out.push(run_check("causality.paper_codec", || {
            let codec = Codec::paper();
            let probe = ProbeOptions { n_samples: 8 * codec.hop(), probes: Some(16), batch: 4, seed: opts.seed };
            checks::codec_causality(&codec, &probe, opts.seed, true)
        }));
    }
    out.push(run_check("causality.primitives", || checks::primitive_causality(opts.seed)));
}

fn kl(opts: &VerifyOptions, out: &mut Sink<'_>) {
    out.push(run_check("kl.monte_carlo", || checks::kl_monte_carlo(opts.kl_posteriors, opts.kl_draws, opts.seed)));
    out.push(run_check("kl.unit_gaussian", || checks::kl_unit(opts.kl_draws, opts.seed)));
    out.push(run_check("kl.nonnegative", || checks::kl_nonnegative(100, opts.kl_draws / 10, opts.seed)));
    out.push(run_check("kl.flow_round_trip", || checks::flow_round_trip(opts.seed)));
}

fn bound(opts: &VerifyOptions, out: &mut Sink<'_>) {
    out.push(run_check("bound.linear_oracle", || checks::bound_linear_oracle(opts.seed)));
    out.push(run_check("bound.degenerate", || checks::bound_degenerate(opts.seed)));
    let tok = match &opts.tokenizer {
        Some(path) => Tokenizer::open(path, EnrichConfig::default()),
        None => train_toy_vae(opts.seed),
    };
    match tok {
        Ok(tok) => {
            out.push(run_check("bound.trained", || {
                checks::bound_trained(&tok, opts.bound_utterances, opts.bound_probes, opts.seed)
            }));
            out.push(run_check("bound.noise_monotone", || checks::bound_monotone_noise(&tok, 32, opts.seed)));
        }
        Err(e) => out.push(run_check("bound.trained", || Err(e))),
    }
}

fn invariants(opts: &VerifyOptions, out: &mut Sink<'_>) {
    let seed = opts.seed;
    let list: Vec<(&str, Box<dyn FnOnce() -> checks::Verdict>)> = vec![
        ("numerics.determinism", Box::new(move || checks::determinism(seed))),
        ("dsp.mel_identity_symmetry", Box::new(move || checks::mel_identity_symmetry(seed))),
        ("codec.length_contract", Box::new(move || checks::length_contract(seed))),
        ("adversary.gradient_separation", Box::new(move || checks::gradient_separation(seed))),
        ("enrich.stop_gradient", Box::new(move || checks::stop_gradient(seed))),
        ("enrich.distill_bounds", Box::new(move || checks::distill_bounds(seed))),
        ("pipeline.stage_order", Box::new(move || checks::stage_order(seed))),
        ("pipeline.loss_weights", Box::new(checks::loss_weights)),
        ("pipeline.stage_two_freeze", Box::new(move || checks::stage_two_freeze(seed, 3))),
        ("pipeline.reproducibility", Box::new(move || checks::reproducibility(seed))),
        ("pipeline.persistence", Box::new(move || checks::persistence(seed))),
        ("unified.factorization", Box::new(move || checks::factorization(seed))),
        ("unified.generated_decode", Box::new(move || checks::generated_decode(seed))),
        ("unified.mixed_tasks", Box::new(move || checks::mixed_tasks(seed, 12))),
        ("unified.ablation_flags", Box::new(move || checks::ablation_flags(seed))),
        ("unified.layouts", Box::new(checks::layouts)),
        ("rates.presets", Box::new(checks::rates)),
    ];
    for (name, f) in list {
        out.push(run_check(name, f));
    }
    if opts.paper_preset {
        out.push(run_check("codec.paper_shapes", || checks::paper_shapes(seed)));
    }
}

/// Collects outcomes and reports each one as it completes.
pub struct Sink<'a> {
    checks: Vec<CheckOutcome>,
    progress: &'a mut dyn FnMut(&CheckOutcome),
}

impl Sink<'_> {
    fn push(&mut self, c: CheckOutcome) {
        (self.progress)(&c);
        self.checks.push(c);
    }
}

/// Runs `suite`; `progress` sees each outcome as it completes.
pub fn run(suite: Suite, opts: &VerifyOptions, mut progress: impl FnMut(&CheckOutcome)) -> VerifyReport {
    let mut sink = Sink { checks: Vec::new(), progress: &mut progress };
    if matches!(suite, Suite::Gradients | Suite::All) {
        gradients(opts, &mut sink);
    }
    if matches!(suite, Suite::Causality | Suite::All) {
        causality(opts, &mut sink);
    }
    if matches!(suite, Suite::Kl | Suite::All) {
        kl(opts, &mut sink);
    }
    if suite == Suite::All {
        invariants(opts, &mut sink);
    }
    if matches!(suite, Suite::Bound | Suite::All) {
        bound(opts, &mut sink);
    }
    let checks = sink.checks;
    let pass = checks.iter().all(|c| c.pass);
    VerifyReport { suite: format!("{suite:?}").to_lowercase(), checks, pass }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_become_failed_outcomes() {
        let c = run_check("x", || Err(Error::invalid("boom")));
        assert!(!c.pass);
        assert!(c.details["error"].as_str().unwrap().contains("boom"));
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("kl".parse::<Suite>().unwrap(), Suite::Kl);
        assert!("nope".parse::<Suite>().is_err());
    }
}
