use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use holitok::codec::CodecConfig;
use holitok::dsp::corpus::{format_symbols, parse_symbols, synth_corpus, CorpusConfig, LABEL_HIGH, LABEL_LOW};
use holitok::enrich::EnrichConfig;
use holitok::pipeline::{run_stage, save_checkpoint, LatentFile, Stage, StagePlan, Tokenizer, TrainConfig};
use holitok::rates::rate_info;
use holitok::unified::{generate, prepare_examples, transcribe as greedy_transcribe, unpatchify, UnifiedModel};
use holitok::verify::{self, VerifyOptions};
use holitok::Error;
use serde_json::{json, Value};

use crate::audio::{read_waveform, write_waveform};
use crate::run_config::{read_overrides, DownstreamSettings, RunConfig};
use crate::{
    DecodeArgs, EncodeArgs, Failure, ReportArgs, SynthesizeArgs, TrainDownstreamArgs, TrainTokenizerArgs,
    TranscribeArgs, VerifyArgs,
};

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn corpus_config(tok: &Tokenizer) -> CorpusConfig {
    CorpusConfig { sample_rate: tok.codec.cfg.sample_rate, ..CorpusConfig::default() }
}

pub fn tokenizer_checkpoint(out: &Path, stage: u32) -> PathBuf {
    out.join(format!("tokenizer_stage{stage}.htok"))
}

pub fn train_tokenizer(a: TrainTokenizerArgs) -> Result<()> {
    let out = &a.common.out;
    let mut overrides = read_overrides(a.common.config.as_deref())?;
    overrides.insert("stage".into(), a.stage.into());
    if let Some(seed) = a.common.seed {
        overrides.insert("seed".into(), seed.into());
    }
    let cfg = TrainConfig::from_json(&Value::Object(overrides.clone()).to_string())?;
    let stage = Stage::from_number(a.stage)?;
    let enrich = EnrichConfig { causal_encoder: cfg.ablation.causal_supervision_encoder, ..EnrichConfig::default() };
    let mut tok = if stage == Stage::I {
        if a.from.is_some() {
            return Err(Error::Config("--from applies to stages 2 and 3 only".into()).into());
        }
        Tokenizer::new(&cfg.preset, enrich, cfg.seed)?
    } else {
        let prev = a.from.clone().unwrap_or_else(|| tokenizer_checkpoint(out, a.stage - 1));
        if !prev.exists() {
            return Err(Error::StageOrder(format!(
                "stage {} checkpoint required before stage {}: {} not found",
                a.stage - 1,
                a.stage,
                prev.display()
            ))
            .into());
        }
        let tok = Tokenizer::open(&prev, enrich)?;
        if tok.preset_name() != cfg.preset {
            return Err(Error::Config(format!(
                "{} holds a `{}` tokenizer but the config asks for `{}`",
                prev.display(),
                tok.preset_name(),
                cfg.preset
            ))
            .into());
        }
        tok
    };
    create_dir(out)?;
    let corpus = synth_corpus(cfg.corpus_seed, cfg.corpus_size, &corpus_config(&tok))?;
    let plan = StagePlan::new(stage, cfg.steps_for(a.stage), &cfg.loss_weights, &cfg.ablation);
    eprintln!("stage {}: {} steps on {} utterances ({})", a.stage, plan.steps, corpus.len(), cfg.ablation.tag());
    let log = run_stage(&mut tok, &plan, &corpus, &cfg)?;
    if !log.all_finite() {
        return Err(Failure(format!("stage {} produced non-finite losses", a.stage)).into());
    }

    let ckpt = tokenizer_checkpoint(out, a.stage);
    tok.save(&ckpt)?;
    log.save(&out.join(format!("stage{}_log.csv", a.stage)))?;
    let run = RunConfig {
        command: "train tokenizer".into(),
        preset: cfg.preset.clone(),
        seed: cfg.seed,
        out: out.clone(),
        overrides,
        resolved: serde_json::to_value(&cfg)?,
    };
    run.save(&out.join(format!("stage{}_run_config.json", a.stage)))?;
    if let Some(last) = log.rows.last() {
        println!("stage {} done: mel {:.4}, total {:.4}; wrote {}", a.stage, last.mel, last.total, ckpt.display());
    }
    Ok(())
}

pub fn train_downstream(a: TrainDownstreamArgs) -> Result<()> {
    let out = &a.common.out;
    let mut overrides = read_overrides(a.common.config.as_deref())?;
    let training = overrides.entry("training").or_insert_with(|| json!({}));
    let Some(training) = training.as_object_mut() else {
        return Err(Error::Config("`training` must be a JSON object".into()).into());
    };
    training.insert("tasks".into(), serde_json::to_value(a.tasks)?);
    if let Some(seed) = a.common.seed {
        training.insert("seed".into(), seed.into());
    }
    if let Some(p) = &a.dit_init {
        training.insert("dit_init".into(), json!(p));
    }
    if a.freeze_semantic_encoder {
        training.insert("freeze_semantic_encoder".into(), true.into());
    }
    if let Some(p) = &a.tokenizer {
        overrides.insert("tokenizer".into(), json!(p));
    }
    let mut s = DownstreamSettings::from_overrides(&overrides)?;
    let tok_path = s
        .tokenizer
        .clone()
        .ok_or_else(|| Error::Config("a tokenizer checkpoint is required (--tokenizer)".into()))?;
    let tok_path = fs::canonicalize(&tok_path).with_context(|| format!("opening {}", tok_path.display()))?;
    let tok = Tokenizer::open(&tok_path, EnrichConfig::default())?;
    s.tokenizer = Some(tok_path);
    let model_overrides = overrides.get("model").and_then(Value::as_object);
    if !model_overrides.is_some_and(|m| m.contains_key("latent_dim")) {
        s.model.latent_dim = tok.codec.cfg.latent_dim;
    }
    s.model.validate()?;
    s.training.validate(s.model.patch_mode)?;

    let mut model = UnifiedModel::new(s.model.clone(), &tok, s.training.seed)?;
    model.check_tasks(s.training.tasks)?;
    if let Some(p) = &s.training.dit_init {
        let n = model.init_dit_from(p)?;
        eprintln!("initialized {n} DiT tensors from {}", p.display());
    }
    create_dir(out)?;
    let corpus = synth_corpus(s.corpus_seed, s.corpus_size, &corpus_config(&tok))?;
    let examples = prepare_examples(&tok, &corpus, s.training.latents, s.training.seed)?;
    eprintln!("downstream: {} steps on {} utterances", s.training.steps, examples.len());
    let log = holitok::unified::train_downstream(&mut model, &examples, &s.training)?;
    if log.rows.iter().any(|r| !r.total.is_finite()) {
        return Err(Failure("downstream training produced non-finite losses".into()).into());
    }

    save_checkpoint(&model.params, &out.join("downstream.htok"))?;
    let csv_path = out.join("downstream_log.csv");
    fs::write(&csv_path, log.to_csv()?).with_context(|| format!("writing {}", csv_path.display()))?;
    let run = RunConfig {
        command: "train downstream".into(),
        preset: tok.preset_name().into(),
        seed: s.training.seed,
        out: out.clone(),
        overrides,
        resolved: serde_json::to_value(&s)?,
    };
    run.save(&out.join("run_config.json"))?;
    let recent = |f: fn(&holitok::unified::train::DownstreamRow) -> Option<f64>| {
        log.recent_mean(50, f).map_or("-".to_string(), |v| format!("{v:.4}"))
    };
    println!(
        "downstream done: ce {}, fm {}, eos {} (last 50 steps); wrote {}",
        recent(|r| r.ce),
        recent(|r| r.fm),
        recent(|r| r.eos),
        out.join("downstream.htok").display()
    );
    Ok(())
}

pub fn codec_encode(a: EncodeArgs) -> Result<()> {
    let tok = Tokenizer::open(&a.checkpoint, EnrichConfig::default())?;
    let (x, rate) = read_waveform(&a.input, a.sample_rate.unwrap_or(tok.codec.cfg.sample_rate))?;
    let lf = tok.encode_waveform(&x, rate)?;
    lf.save(&a.output)?;
    println!("{} samples -> {} frames at {} Hz, d = {}", x.len(), lf.frames.shape()[0], lf.frame_rate, lf.latent_dim);
    Ok(())
}

pub fn codec_decode(a: DecodeArgs) -> Result<()> {
    let tok = Tokenizer::open(&a.checkpoint, EnrichConfig::default())?;
    let lf = LatentFile::load(&a.input)?;
    let w = tok.decode_latents(&lf)?;
    write_waveform(&a.output, &w, tok.codec.cfg.sample_rate)?;
    println!("{} frames -> {} samples at {} Hz", lf.frames.shape()[0], w.len(), tok.codec.cfg.sample_rate);
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let opts = VerifyOptions { paper_preset: a.paper_preset, tokenizer: a.tokenizer, seed: a.seed, ..VerifyOptions::default() };
    let report = verify::run(a.suite, &opts, |c| {
        eprintln!("{} {} ({:.1}s)", if c.pass { "PASS" } else { "FAIL" }, c.name, c.seconds);
    });
    let path = a.report.unwrap_or_else(|| PathBuf::from(format!("verify_{}.json", report.suite)));
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    let failed: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
    println!("{}/{} checks passed; report in {}", report.checks.len() - failed.len(), report.checks.len(), path.display());
    if !failed.is_empty() {
        return Err(Failure(format!("failed checks: {}", failed.join(", "))).into());
    }
    Ok(())
}

pub fn report_cr(a: ReportArgs) -> Result<()> {
    let mut cfg = CodecConfig::preset(&a.preset)?;
    if let Some(d) = a.latent_dim {
        cfg.latent_dim = d;
    }
    cfg.validate()?;
    let r = rate_info(&cfg).report();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("preset   {}", a.preset);
        println!("f_s      {} Hz", r.f_s);
        println!("f_z      {} Hz", r.f_z);
        println!("d_z      {}", r.d_z);
        println!("b_float  {} bits", r.b_float);
        println!("CR       {} = {}x", r.cr_exact, r.cr);
        println!("TPS      {}", r.tps);
    }
    Ok(())
}

/// Frozen tokenizer and trained model from a `train downstream` directory.
fn load_downstream(dir: &Path) -> Result<(Tokenizer, UnifiedModel)> {
    let run = RunConfig::load(&dir.join("run_config.json"))?;
    let s: DownstreamSettings = serde_json::from_value(run.resolved)?;
    let tok_path = s.tokenizer.ok_or_else(|| Error::Config("run_config.json names no tokenizer".into()))?;
    let tok = Tokenizer::open(&tok_path, EnrichConfig::default())?;
    let mut model = UnifiedModel::new(s.model, &tok, 0)?;
    model.load_params(&dir.join("downstream.htok"))?;
    Ok((tok, model))
}

pub fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let text = parse_symbols(&a.text)?;
    let desc = match a.desc.as_deref() {
        None => None,
        Some("low") => Some(vec![LABEL_LOW]),
        Some("high") => Some(vec![LABEL_HIGH]),
        Some(other) => return Err(Error::Config(format!("--desc must be `low` or `high`, got `{other}`")).into()),
    };
    let (tok, model) = load_downstream(&a.model)?;
    let g = generate(&model, &text, desc.as_deref(), a.seed)?;
    let cfg = &tok.codec.cfg;
    let lf = LatentFile { frame_rate: cfg.frame_rate(), latent_dim: cfg.latent_dim as u32, frames: unpatchify(&g.patches)? };
    let w = tok.decode_latents(&lf)?;
    write_waveform(&a.output, &w, cfg.sample_rate)?;
    println!(
        "{} patches, {} samples; {}",
        g.patches.count(),
        w.len(),
        if g.stopped { "stopped on EOS" } else { "hit the patch limit" }
    );
    Ok(())
}

pub fn transcribe(a: TranscribeArgs) -> Result<()> {
    let (tok, model) = load_downstream(&a.model)?;
    let (x, rate) = read_waveform(&a.input, a.sample_rate.unwrap_or(tok.codec.cfg.sample_rate))?;
    let lf = tok.encode_waveform(&x, rate)?;
    println!("{}", format_symbols(&greedy_transcribe(&model, &lf.frames)?));
    Ok(())
}
