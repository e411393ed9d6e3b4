//! Individual checks. Each returns its verdict and a JSON body of the
//! quantities it measured.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::codec::bottleneck::{flow_forward, flow_round_trip_error, kl_samples, standard_normal, FLOW_ROUND_TRIP_TOL};
use crate::codec::{causality_probe, kl_closed_form, Codec, CodecConfig, Posterior, ProbeOptions};
use crate::dsp::corpus::{synth_corpus, CorpusConfig, Utterance};
use crate::dsp::mel::{multiscale_mel_loss, toy_scales};
use crate::enrich::supervision::encode_latents;
use crate::enrich::{distill_loss, EnrichConfig};
use crate::error::{Error, Result};
use crate::numerics::nn::causal_mask;
use crate::numerics::{attention, check_parameters, CheckOptions, Conv1dSpec, ParameterSet, Session, Tensor, Var};
use crate::pipeline::checkpoint::{decode_checkpoint, encode_checkpoint, LatentFile};
use crate::pipeline::fidelity::{codec_samples, fidelity_bound_report, CodecDecoder, FidelitySample, LinearDecoder};
use crate::pipeline::stages::{
    check_stage_order, generator_losses, generator_session, make_batch, run_stage, stage_three_gradient_norms, Batch,
    Stage, StagePlan, Tokenizer,
};
use crate::pipeline::{Ablation, LatentDecoder, LossWeights, Precision, TrainConfig};
use crate::rates::rate_info;
use crate::unified::model::PatchMode;
use crate::unified::patch::from_patches;
use crate::unified::train::factorization_probe;
use crate::unified::{
    build_layout, patchify, prepare_examples, train_downstream, unpatchify, DownstreamConfig, LatentSource, LayoutTask,
    Tasks, UnifiedConfig, UnifiedModel,
};

pub type Verdict = Result<(bool, Value)>;

fn small_corpus(seed: u64, n: usize) -> Result<Vec<Utterance>> {
    synth_corpus(seed, n, &CorpusConfig::default())
}

/// Short Stage-III batch for gradient-level checks.
fn short_batch(tok: &Tokenizer, seed: u64, frames: usize) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = small_corpus(seed, 2)?;
    make_batch(&corpus, 2, frames * tok.hop(), &tok.codec, &mut rng)
}

/// A tokenizer whose zero-initialized read-outs carry random weights, so
/// every path of the composite loss is live.
fn live_tokenizer(seed: u64) -> Result<Tokenizer> {
    let mut tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
    tok.gen.randomize_zero_weights(0.1, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce))?;
    Ok(tok)
}

/// Parameters probed by the composite check: at least one per component
/// of the Stage-III objective.
pub const COMPOSITE_PARAMETERS: [&str; 16] = [
    "encoder.conv_in.weight",
    "encoder.block1.res0.conv1.weight",
    "encoder.block3.down.bias",
    "encoder.lookahead.weight",
    "bottleneck.lstm0.w_ih",
    "bottleneck.stats.weight",
    "bottleneck.flow.0.fc2.weight",
    "decoder.pre.lstm1.w_hh",
    "decoder.up0.conv.weight",
    "decoder.up1.amp0.res0.snake1.log_alpha",
    "decoder.post.log_beta",
    "decoder.conv_out.weight",
    "heads.frame.fc2.weight",
    "heads.utt.fc1.weight",
    "sup.enc.in.weight",
    "sup.dec.block0.attn.k.weight",
];

/// Central-difference steps of the composite check.
pub const COMPOSITE_STEP: f64 = 1e-6;
pub const COMPOSITE_WIDE_STEP: f64 = 1e-4;

/// Finite-difference check of the full Stage-III generator objective with
/// respect to parameters throughout the model, in 64-bit mode.
pub fn composite_gradient(seeds: u64, tol: f64) -> Verdict {
    let weights = LossWeights::default();
    let plan = StagePlan::new(Stage::III, 1, &weights, &Ablation::default());
    let names: Vec<String> = COMPOSITE_PARAMETERS.iter().map(|s| s.to_string()).collect();
    let mut runs = Vec::new();
    let mut pass = true;
    for seed in 0..seeds {
        let tok = live_tokenizer(seed)?;
        let batch = short_batch(&tok, seed, 8)?;
        let mut all = tok.gen.clone();
        all.extend(tok.disc_params.clone())?;
        all.extend(tok.teachers.params.clone())?;
        // leaky rectifiers and L1 terms put kinks everywhere: the short step
        // avoids straddling them, the wide one rescues tensors whose
        // gradients are too small to resolve against an O(100) loss
        let opts = CheckOptions { tol, step: COMPOSITE_STEP, wide_step: Some(COMPOSITE_WIDE_STEP), max_entries: 6, seed };
        let r = check_parameters(&all, &names, |s| Ok(generator_losses(&tok, s, &plan, &weights, &batch)?.total), opts)?;
        pass &= r.pass;
        let worst = r.inputs.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).map(|i| i.name.clone());
        runs.push(json!({ "seed": seed, "max_rel_err": r.max_rel_err(), "worst": worst, "pass": r.pass }));
    }
    Ok((pass, json!({ "tol": tol, "parameters": names, "runs": runs })))
}

pub fn codec_causality(codec: &Codec, opts: &ProbeOptions, seed: u64, wide: bool) -> Verdict {
    let params = codec.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?;
    let r = if wide { causality_probe::<f32>(codec, &params, opts)? } else { causality_probe::<f64>(codec, &params, opts)? };
    let leaking = r.leaking_layers().into_iter().map(String::from).collect::<Vec<_>>();
    Ok((r.pass, json!({ "report": r, "leaking_layers": leaking })))
}

/// Perturbs every input step of a time-major `[.., T, row]` input in turn
/// and counts outputs that moved before the first step allowed to see it.
/// Also counts probes where the first allowed output did move, so that a
/// constant function cannot pass vacuously.
fn step_probe(
    x: &Tensor<f64>,
    steps: usize,
    in_row: usize,
    out_row: usize,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    first_allowed: impl Fn(usize) -> usize,
) -> Result<(usize, usize)> {
    let base = f(x)?;
    let (mut leaks, mut responsive) = (0, 0);
    for t in 0..steps {
        let mut xi = x.clone();
        xi.data_mut()[t * in_row..(t + 1) * in_row].iter_mut().for_each(|v| *v += 0.5);
        let y = f(&xi)?;
        let cut = (first_allowed(t) * out_row).min(y.numel());
        if base.data()[..cut] != y.data()[..cut] {
            leaks += 1;
        }
        if base.data()[cut..(cut + out_row).min(y.numel())] != y.data()[cut..(cut + out_row).min(y.numel())] {
            responsive += 1;
        }
    }
    Ok((leaks, responsive))
}

/// Exhaustive causality probe of every causal primitive on small shapes,
/// and of the supervision encoder in its causal configuration.
pub fn primitive_causality(seed: u64) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut push = |name: &str, (leaks, responsive): (usize, usize), steps: usize| {
        rows.push(json!({ "name": name, "steps": steps, "leaks": leaks, "responsive": responsive }));
        leaks == 0 && responsive > 0
    };
    let mut pass = true;
    for (k, stride, dilation) in [(3, 1, 1), (3, 1, 2), (4, 2, 1), (2, 4, 1), (7, 1, 3)] {
        let t = 20;
        let x: Tensor<f64> = standard_normal(&[1, 1, t], &mut rng);
        let w = Var::constant(standard_normal(&[1, 1, k], &mut rng));
        let spec = Conv1dSpec::causal(k, stride, dilation);
        let r = step_probe(&x, t, 1, 1, |x| Ok(Var::constant(x.clone()).conv1d(&w, None, spec)?.value().clone()), |t| {
            t.div_ceil(stride)
        })?;
        pass &= push(&format!("conv1d k{k} s{stride} d{dilation}"), r, t);
    }
    for (k, stride) in [(2, 2), (4, 2), (8, 4), (3, 1)] {
        let t = 8;
        let x: Tensor<f64> = standard_normal(&[1, 1, t], &mut rng);
        let w = Var::constant(standard_normal(&[1, 1, k], &mut rng));
        let trim = k.saturating_sub(stride);
        let r = step_probe(
            &x,
            t,
            1,
            1,
            |x| Ok(Var::constant(x.clone()).conv_transpose1d(&w, None, stride, trim)?.value().clone()),
            |t| t * stride,
        )?;
        pass &= push(&format!("conv_transpose1d k{k} s{stride}"), r, t);
    }
    {
        let (t, d, h) = (10, 3, 4);
        let x: Tensor<f64> = standard_normal(&[1, t, d], &mut rng);
        let w_ih = Var::constant(standard_normal(&[d, 4 * h], &mut rng));
        let w_hh = Var::constant(standard_normal(&[h, 4 * h], &mut rng));
        let b = Var::constant(standard_normal(&[4 * h], &mut rng));
        let r = step_probe(&x, t, d, h, |x| Ok(Var::constant(x.clone()).lstm_layer(&w_ih, &w_hh, &b)?.value().clone()), |t| t)?;
        pass &= push("lstm", r, t);
    }
    {
        let (t, d) = (9, 4);
        let x: Tensor<f64> = standard_normal(&[1, t, d], &mut rng);
        let mask = causal_mask(t);
        let r = step_probe(
            &x,
            t,
            d,
            d,
            |x| {
                let v = Var::constant(x.clone());
                let q = v.scale(0.7)?;
                Ok(attention(&q, &v, &v.square()?, 2, Some(Rc::clone(&mask)))?.value().clone())
            },
            |t| t,
        )?;
        pass &= push("causal attention", r, t);
    }
    {
        let cfg = EnrichConfig { causal_encoder: true, ..EnrichConfig::default() };
        let tok = Tokenizer::new("toy", cfg.clone(), seed)?;
        let s: Session<f64> = Session::eval(&tok.gen);
        let (t, d) = (10, tok.codec.cfg.latent_dim);
        let z: Tensor<f64> = standard_normal(&[t, d], &mut rng);
        let r = step_probe(&z, t, d, cfg.sup_width, |z| Ok(encode_latents(&s, &cfg, &Var::constant(z.clone()))?.value().clone()), |t| t)?;
        pass &= push("supervision encoder (causal)", r, t);
    }
    Ok((pass, json!({ "primitives": rows })))
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo KL through an identity flow for one posterior, repeated
/// over `draws` rows: returns estimate, standard error and closed form.
fn kl_case(s: &Session<f64>, cfg: &CodecConfig, mu: &[f64], log_sigma: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64)> {
    let d = cfg.latent_dim;
    let tile = |v: &[f64]| -> Result<Var<f64>> {
        Ok(Var::constant(Tensor::new(vec![1, draws, d], v.iter().copied().cycle().take(draws * d).collect())?))
    };
    let p = Posterior { mu: tile(mu)?, log_sigma: tile(log_sigma)? };
    let eps: Tensor<f64> = standard_normal(&[1, draws, d], rng);
    let samples = kl_samples(s, cfg, &p, &[eps])?;
    let (mean, se) = mean_se(&samples);
    Ok((mean, se, kl_closed_form(mu, log_sigma, d)))
}

fn identity_flow_session_params(cfg: &CodecConfig, seed: u64) -> Result<ParameterSet> {
    let codec = Codec::new(cfg.clone())?;
    codec.init_params(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Each of `posteriors` random diagonal Gaussians: the estimate at `draws`
/// samples lies within 3 standard errors of the closed form.
pub fn kl_monte_carlo(posteriors: usize, draws: usize, seed: u64) -> Verdict {
    let cfg = CodecConfig::toy();
    let params = identity_flow_session_params(&cfg, seed)?;
    let s: Session<f64> = Session::eval(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.latent_dim;
    let mut worst_z = 0.0f64;
    let mut cases = Vec::new();
    for _ in 0..posteriors {
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..0.5)).collect();
        let (mc, se, closed) = kl_case(&s, &cfg, &mu, &ls, draws, &mut rng)?;
        let z = (mc - closed).abs() / se;
        worst_z = worst_z.max(z);
        cases.push(json!({ "mc": mc, "se": se, "closed_form": closed, "deviation_se": z }));
    }
    Ok((worst_z < 3.0, json!({ "posteriors": posteriors, "draws": draws, "max_deviation_se": worst_z, "cases": cases })))
}

/// `mu = 1, sigma = 1`: half a nat per dimension.
pub fn kl_unit(draws: usize, seed: u64) -> Verdict {
    let cfg = CodecConfig::toy();
    let params = identity_flow_session_params(&cfg, seed)?;
    let s: Session<f64> = Session::eval(&params);
    let d = cfg.latent_dim;
    let (mc, se, closed) = kl_case(&s, &cfg, &vec![1.0; d], &vec![0.0; d], draws, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let per_dim = mc / d as f64;
    let dev = (mc - 0.5 * d as f64).abs() / se;
    Ok((dev < 3.0 && closed == 0.5 * d as f64, json!({ "per_dim": per_dim, "closed_form_per_dim": closed / d as f64, "se_per_dim": se / d as f64, "deviation_se": dev })))
}

/// Mean estimate over random posteriors is not significantly negative.
pub fn kl_nonnegative(posteriors: usize, draws: usize, seed: u64) -> Verdict {
    let cfg = CodecConfig::toy();
    let params = identity_flow_session_params(&cfg, seed)?;
    let s: Session<f64> = Session::eval(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6c);
    let d = cfg.latent_dim;
    let (mut total, mut var) = (0.0, 0.0);
    for _ in 0..posteriors {
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
        let (mc, se, _) = kl_case(&s, &cfg, &mu, &ls, draws, &mut rng)?;
        total += mc;
        var += se * se;
    }
    let n = posteriors as f64;
    let (mean, se) = (total / n, var.sqrt() / n);
    Ok((mean >= -3.0 * se, json!({ "mean": mean, "se": se, "posteriors": posteriors, "draws": draws })))
}

/// Identity flow has zero log-determinant; a randomized flow inverts to
/// within tolerance.
pub fn flow_round_trip(seed: u64) -> Verdict {
    let cfg = CodecConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = identity_flow_session_params(&cfg, seed)?;
    let z: Tensor<f64> = standard_normal(&[32, cfg.latent_dim], &mut rng);
    let (identity_moved, identity_logdet) = {
        let s: Session<f64> = Session::eval(&params);
        let (zk, ld) = flow_forward(&s, &cfg, &Var::constant(z.clone()))?;
        (zk.value().max_abs_diff(&z), ld.value().data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
    };
    let names: Vec<String> = params.names().filter(|n| n.starts_with("bottleneck.flow.")).map(String::from).collect();
    for n in &names {
        let t = standard_normal::<f64>(params.get(n)?.shape(), &mut rng).map(|v| 0.5 * v);
        params.set(n, t)?;
    }
    let s: Session<f64> = Session::eval(&params);
    let err = flow_round_trip_error(&s, &cfg, z.data())?;
    let pass = identity_moved == 0.0 && identity_logdet == 0.0 && err < FLOW_ROUND_TRIP_TOL;
    Ok((pass, json!({ "identity_max_move": identity_moved, "identity_max_logdet": identity_logdet, "random_flow_rel_err": err, "tol": FLOW_ROUND_TRIP_TOL })))
}

fn linear_problem(seed: u64, shift: f64, noise: f64) -> (LinearDecoder, Vec<FidelitySample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d, len) = (3, 2, 10);
    let dec = LinearDecoder { w: (0..len).map(|_| (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let samples = (0..20)
        .map(|_| {
            let z_ae: Tensor<f64> = standard_normal(&[t, d], &mut rng);
            let e: Tensor<f64> = standard_normal(&[t, d], &mut rng);
            let z_vae = Tensor::new(vec![t, d], z_ae.data().iter().zip(e.data()).map(|(a, e)| a + shift * e).collect()).unwrap();
            let x = dec.decode(&z_ae).unwrap().iter().map(|v| v + noise * rng.random_range(-1.0..1.0)).collect();
            FidelitySample { x, z_ae, z_vae }
        })
        .collect();
    (dec, samples)
}

/// Linear decoder oracle: the probed constant never exceeds the operator
/// norm, the bound holds with the operator norm, and a residual opposite
/// to the shift along the top singular direction attains it with equality.
pub fn bound_linear_oracle(seed: u64) -> Verdict {
    let (dec, samples) = linear_problem(seed, 0.3, 0.1);
    let r = fidelity_bound_report(&dec, &samples, 64, seed)?;
    let (op, v) = dec.operator_norm();
    let holds = r.lhs <= r.rhs_with(op) && r.l_hat <= op * (1.0 + 1e-9);

    let c = 0.7;
    let z_ae = Tensor::new(vec![3, 2], vec![0.2, -0.4, 1.0, 0.5, -0.3, 0.8])?;
    let shift: Vec<f64> = v.iter().map(|x| c * x).collect();
    let z_vae = Tensor::new(vec![3, 2], z_ae.data().iter().zip(&shift).map(|(a, s)| a + s).collect())?;
    let g = dec.decode(&z_ae)?;
    let ws = dec.decode(&Tensor::new(vec![3, 2], shift)?)?;
    let x: Vec<f64> = g.iter().zip(&ws).map(|(a, b)| a - b).collect();
    let tight = fidelity_bound_report(&dec, &[FidelitySample { x, z_ae, z_vae }], 8, seed)?;
    let gap = (tight.lhs - tight.rhs_with(op)).abs() / tight.lhs;
    Ok((
        holds && gap < 1e-9,
        json!({ "operator_norm": op, "l_hat": r.l_hat, "lhs": r.lhs, "rhs_operator_norm": r.rhs_with(op), "equality_relative_gap": gap }),
    ))
}

pub fn bound_degenerate(seed: u64) -> Verdict {
    let (dec, mut samples) = linear_problem(seed, 0.0, 0.1);
    for s in &mut samples {
        s.z_vae = s.z_ae.clone();
    }
    let r = fidelity_bound_report(&dec, &samples, 8, seed)?;
    let empty = fidelity_bound_report(&dec, &[], 8, seed).is_err();
    Ok((r.delta_shift == 0.0 && r.lhs == r.eps_ae && r.pass && empty, json!({ "delta_shift": r.delta_shift, "lhs": r.lhs, "eps_ae": r.eps_ae })))
}

/// Both sides of the bound on a trained tokenizer.
pub fn bound_trained(tok: &Tokenizer, utterances: usize, probes: usize, seed: u64) -> Verdict {
    if tok.stage < 2 {
        return Err(Error::StageOrder("the fidelity bound needs a tokenizer trained through stage 2".into()));
    }
    let corpus = synth_corpus(seed ^ 0xb0d, utterances, &CorpusConfig::default())?;
    let samples = codec_samples(tok, &corpus, 1.0, seed)?;
    let r = fidelity_bound_report(&CodecDecoder { tok }, &samples, probes, seed)?;
    Ok((r.pass && r.n_samples >= 100.min(utterances), serde_json::to_value(&r)?))
}

/// Larger injected noise never shrinks the measured shift beyond 3
/// standard errors of the per-utterance difference.
pub fn bound_monotone_noise(tok: &Tokenizer, utterances: usize, seed: u64) -> Verdict {
    let corpus = synth_corpus(seed ^ 0x303, utterances, &CorpusConfig::default())?;
    let scales = [0.25, 0.5, 1.0, 2.0];
    let per_scale = scales
        .iter()
        .enumerate()
        .map(|(i, &sc)| {
            Ok(codec_samples(tok, &corpus, sc, seed + i as u64)?
                .iter()
                .map(|s| s.z_vae.data().iter().zip(s.z_ae.data()).map(|(a, b)| (a - b).powi(2)).sum())
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut steps = Vec::new();
    let mut pass = true;
    for w in 0..scales.len() - 1 {
        let diff: Vec<f64> = per_scale[w + 1].iter().zip(&per_scale[w]).map(|(b, a)| b - a).collect();
        let (m, se) = mean_se(&diff);
        pass &= m >= -3.0 * se;
        steps.push(json!({ "from": scales[w], "to": scales[w + 1], "mean_increase": m, "se": se }));
    }
    let means: Vec<f64> = per_scale.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    Ok((pass, json!({ "scales": scales, "delta_shift": means, "steps": steps })))
}

pub fn determinism(seed: u64) -> Verdict {
    let run = || -> Result<(Vec<f64>, Vec<f64>)> {
        let tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
        let corpus = small_corpus(seed, 2)?;
        let s: Session<f64> = Session::eval(&tok.gen);
        let x = Var::constant(Tensor::new(vec![1, corpus[0].samples.len()], corpus[0].samples.clone())?);
        let z = tok.codec.encode(&s, &x)?;
        let y = tok.codec.decode(&s, &z)?;
        Ok((z.value().data().to_vec(), y.value().data().to_vec()))
    };
    let (a, b) = (run()?, run()?);
    let same = a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((same, json!({ "latent_values": a.0.len(), "waveform_values": a.1.len() })))
}

pub fn mel_identity_symmetry(seed: u64) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = toy_scales();
    let x = Var::constant(standard_normal::<f64>(&[2, 1000], &mut rng).map(|v| 0.3 * v));
    let y = Var::constant(standard_normal::<f64>(&[2, 1000], &mut rng).map(|v| 0.3 * v));
    let same = multiscale_mel_loss(&x, &x, &scales)?.item();
    let (xy, yx) = (multiscale_mel_loss(&x, &y, &scales)?.item(), multiscale_mel_loss(&y, &x, &scales)?.item());
    Ok((same == 0.0 && (xy - yx).abs() <= 1e-12 * xy.abs() && xy > 0.0, json!({ "self": same, "xy": xy, "yx": yx })))
}

/// `decode(encode(x))` has `ceil(n / hop) * hop` samples.
pub fn length_contract(seed: u64) -> Verdict {
    let codec = Codec::toy();
    let params = codec.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?;
    let s: Session<f32> = Session::eval(&params);
    let hop = codec.hop();
    let mut rows = Vec::new();
    let mut pass = true;
    for n in [1, hop - 1, hop, hop + 1, 3 * hop + 17, 1000, 8000] {
        let x = Var::constant(Tensor::new(vec![1, n], vec![0.1f32; n])?);
        let z = codec.encode(&s, &x)?;
        let y = codec.decode(&s, &z)?;
        let expect = n.div_ceil(hop) * hop;
        pass &= y.shape() == [1, expect] && z.shape() == [1, n.div_ceil(hop), codec.cfg.latent_dim];
        rows.push(json!({ "input": n, "frames": z.shape()[1], "output": y.shape()[1], "expected": expect }));
    }
    Ok((pass, json!({ "hop": hop, "cases": rows })))
}

/// Forward-only shapes of one second through the paper configuration.
pub fn paper_shapes(seed: u64) -> Verdict {
    let codec = Codec::paper();
    let params = codec.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?;
    let s: Session<f32> = Session::eval(&params);
    let n = codec.cfg.sample_rate as usize;
    let x = Var::constant(Tensor::new(vec![1, n], (0..n).map(|i| (i as f32 * 0.013).sin() * 0.3).collect())?);
    let z = codec.encode(&s, &x)?;
    let y = codec.decode(&s, &z)?;
    let pass = z.shape() == [1, 25, 128] && y.shape() == [1, 48000] && y.value().is_finite();
    Ok((pass, json!({ "latent_shape": z.shape(), "waveform_shape": y.shape() })))
}

/// The generator step leaves the discriminator without gradients, and the
/// discriminator step reaches nothing but discriminator parameters.
pub fn gradient_separation(seed: u64) -> Verdict {
    let tok = live_tokenizer(seed)?;
    let batch = short_batch(&tok, seed, 8)?;
    let weights = LossWeights::default();
    let plan = StagePlan::new(Stage::I, 1, &weights, &Ablation::default());
    let (gen_into_disc, gen_total, x_hat) = {
        let s = generator_session::<f64>(&tok);
        let t = generator_losses(&tok, &s, &plan, &weights, &batch)?;
        t.total.backward()?;
        let g = s.grads();
        let into_disc = g.iter().filter(|(n, t)| n.starts_with("disc.") && t.sum_sq() > 0.0).count();
        (into_disc, g.len(), t.x_hat.value().clone())
    };
    let disc = tok.discriminator();
    let s = Session::<f64>::train(&tok.disc_params);
    let real = disc.forward(&s, &Var::constant(batch.x.clone()))?;
    let fake = disc.forward(&s, &Var::constant(x_hat))?;
    let (_, ld) = crate::adversary::gan_losses(&real.scores, &fake.scores)?;
    ld.backward()?;
    let g = s.grads();
    let outside = g.keys().filter(|n| !n.starts_with("disc.")).count();
    let disc_live = g.values().any(|t| t.sum_sq() > 0.0);
    Ok((
        gen_into_disc == 0 && gen_total > 0 && outside == 0 && disc_live,
        json!({ "generator_grads_in_discriminator": gen_into_disc, "discriminator_grads_outside": outside }),
    ))
}

/// Stage-III gradients reach encoder, bottleneck, heads and supervision
/// net, and are exactly zero on every teacher tensor even when the
/// teachers are bound as trainable leaves.
pub fn stop_gradient(seed: u64) -> Verdict {
    let tok = live_tokenizer(seed)?;
    let batch = short_batch(&tok, seed, 8)?;
    let norms = stage_three_gradient_norms(&tok, &batch, &LossWeights::default(), &Ablation::default(), true)?;
    let group = |p: &str| norms.iter().filter(|(n, _)| n.starts_with(p)).map(|(_, v)| *v).fold(0.0, f64::max);
    let teacher_names = tok.teachers.params.names().count();
    let teacher_max = tok.teachers.params.names().map(|n| norms.get(n).copied().unwrap_or(0.0)).fold(0.0, f64::max);
    let live: Vec<(&str, f64)> = ["encoder.", "bottleneck.", "heads.", "sup."].iter().map(|p| (*p, group(p))).collect();
    let pass = teacher_max == 0.0 && teacher_names > 0 && live.iter().all(|(_, v)| *v > 0.0);
    Ok((pass, json!({ "teacher_max_grad_norm": teacher_max, "teacher_tensors": teacher_names, "group_max_grad_norm": live })))
}

/// `0 <= distill <= 2 (lambda_frame + lambda_utt)` on random inputs.
pub fn distill_bounds(seed: u64) -> Verdict {
    let tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
    let s = Session::<f64>::with_sets(vec![&tok.gen, &tok.teachers.params], false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = 2.0 * (tok.enrich.lambda_frame + tok.enrich.lambda_utt);
    let mut values = Vec::new();
    for i in 0..8 {
        let scale = [0.01, 1.0, 30.0][i % 3];
        let x: Tensor<f64> = standard_normal::<f64>(&[2, 1024], &mut rng).map(|v| 0.3 * v);
        let z: Tensor<f64> = standard_normal::<f64>(&[2, 16, tok.codec.cfg.latent_dim], &mut rng).map(|v| scale * v);
        values.push(distill_loss(&s, &tok.enrich, &Var::constant(z), &Var::constant(x))?.total.item());
    }
    let pass = values.iter().all(|&v| (0.0..=cap).contains(&v));
    Ok((pass, json!({ "values": values, "upper": cap })))
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps: Some(steps),
        batch: 2,
        corpus_size: 4,
        crop_seconds: 0.25,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

pub fn stage_order(seed: u64) -> Verdict {
    let msg = |r: Result<()>| r.err().map(|e| e.to_string()).unwrap_or_default();
    let m2 = msg(check_stage_order(Stage::II, 0));
    let m3 = msg(check_stage_order(Stage::III, 1));
    let ok_in_order = check_stage_order(Stage::I, 0).is_ok() && check_stage_order(Stage::II, 1).is_ok() && check_stage_order(Stage::III, 2).is_ok();
    let mut tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
    let cfg = tiny_config(1);
    let corpus = small_corpus(seed, 2)?;
    let plan = StagePlan::new(Stage::II, 1, &cfg.loss_weights, &cfg.ablation);
    let refused = matches!(run_stage(&mut tok, &plan, &corpus, &cfg), Err(Error::StageOrder(_)));
    let pass = m2.contains("stage 1 checkpoint required") && m3.contains("stage 2 checkpoint required") && ok_in_order && refused;
    Ok((pass, json!({ "stage2_without_1": m2, "stage3_without_2": m3 })))
}

pub fn loss_weights() -> Verdict {
    let w = LossWeights::default();
    let table = [w.spec, w.adv, w.fm, w.beta_low, w.beta_high, w.distill_frame, w.distill_utt, w.sup];
    let expected = [45.0, 1.0, 2.0, 0.1, 7.0, 1.0, 1.0, 1.0];
    let a = Ablation::default();
    let betas = [Stage::I, Stage::II, Stage::III].map(|s| StagePlan::new(s, 1, &w, &a).beta);
    let pass = table == expected && betas == [None, Some(0.1), Some(7.0)];
    Ok((pass, json!({ "weights": w, "betas": betas })))
}

/// A few Stage-II steps leave every encoder and decoder tensor bit-identical
/// while the bottleneck moves.
pub fn stage_two_freeze(seed: u64, steps: usize) -> Verdict {
    let mut tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
    tok.stage = 1;
    let cfg = tiny_config(steps);
    let corpus = small_corpus(seed, cfg.corpus_size)?;
    let before = (tok.gen.fingerprint("encoder"), tok.gen.fingerprint("decoder"), tok.gen.fingerprint("bottleneck"));
    let plan = StagePlan::new(Stage::II, steps, &cfg.loss_weights, &cfg.ablation);
    run_stage(&mut tok, &plan, &corpus, &cfg)?;
    let after = (tok.gen.fingerprint("encoder"), tok.gen.fingerprint("decoder"), tok.gen.fingerprint("bottleneck"));
    let pass = before.0 == after.0 && before.1 == after.1 && before.2 != after.2;
    Ok((pass, json!({ "steps": steps, "encoder": after.0, "decoder": after.1, "bottleneck_changed": before.2 != after.2 })))
}

/// Identical seed and configuration give identical logs in 64-bit mode.
pub fn reproducibility(seed: u64) -> Verdict {
    let run = || -> Result<String> {
        let mut tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
        let cfg = tiny_config(2);
        let corpus = small_corpus(seed, cfg.corpus_size)?;
        let plan = StagePlan::new(Stage::I, 2, &cfg.loss_weights, &cfg.ablation);
        run_stage(&mut tok, &plan, &corpus, &cfg)?.to_csv()
    };
    let (a, b) = (run()?, run()?);
    Ok((a == b, json!({ "rows": a.lines().count().saturating_sub(1) })))
}

pub fn persistence(seed: u64) -> Verdict {
    let tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
    let ps = tok.to_checkpoint()?;
    let bytes = encode_checkpoint(&ps);
    let back = decode_checkpoint(&bytes)?;
    let exact = back.len() == ps.len()
        && ps.iter().all(|(n, t)| {
            back.get(n).is_ok_and(|b| b.shape() == t.shape() && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
        });
    let truncated = matches!(decode_checkpoint(&bytes[..bytes.len() / 2]), Err(Error::Truncated { .. }));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    let magic = matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. }));
    let mut bad = bytes;
    bad[4] = 0xff;
    let version = matches!(decode_checkpoint(&bad), Err(Error::BadVersion { .. }));
    let lf = LatentFile { frame_rate: 125, latent_dim: 8, frames: Tensor::zeros(vec![4, 8]) };
    let mut lb = lf.encode();
    let latent_ok = LatentFile::decode(&lb)? == lf;
    lb[12..16].copy_from_slice(&0u32.to_le_bytes());
    let latent_corrupt = LatentFile::decode(&lb).is_err();
    let pass = exact && truncated && magic && version && latent_ok && latent_corrupt;
    Ok((pass, json!({ "bit_exact": exact, "truncated_error": truncated, "bad_magic_error": magic, "bad_version_error": version, "latent_round_trip": latent_ok, "latent_corrupt_error": latent_corrupt })))
}

fn fresh_unified(seed: u64) -> Result<(Tokenizer, UnifiedModel, Vec<crate::unified::Example>)> {
    let tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
    let model = UnifiedModel::new(UnifiedConfig::default(), &tok, seed)?;
    let corpus = small_corpus(seed, 3)?;
    let ex = prepare_examples(&tok, &corpus, LatentSource::Mean, seed)?;
    Ok((tok, model, ex))
}

pub fn factorization(seed: u64) -> Verdict {
    let (_, model, ex) = fresh_unified(seed)?;
    let r = factorization_probe(&model, &ex[0], seed)?;
    Ok((r.pass, serde_json::to_value(&r)?))
}

/// Any number of generated patches up to `k_max` unpatchifies and decodes
/// through the codec.
pub fn generated_decode(seed: u64) -> Verdict {
    let (tok, model, _) = fresh_unified(seed)?;
    let (p, d) = (model.cfg.patch, model.cfg.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Session<f32> = Session::eval(&tok.gen);
    let mut rows = Vec::new();
    let mut pass = true;
    for k in [1, 2, 7, model.cfg.k_max] {
        let patches: Vec<Vec<f64>> = (0..k).map(|_| standard_normal::<f64>(&[p * d], &mut rng).data().to_vec()).collect();
        let z = unpatchify(&from_patches(&patches, p, d)?)?;
        let frames = z.shape()[0];
        let zv = Var::constant(Tensor::new(vec![1, frames, d], z.data().iter().map(|&v| v as f32).collect())?);
        let y = tok.codec.decode(&s, &zv)?;
        pass &= y.shape() == [1, frames * tok.hop()];
        rows.push(json!({ "patches": k, "frames": frames, "samples": y.shape()[1] }));
    }
    Ok((pass, json!({ "cases": rows })))
}

/// A short unified run draws both tasks and keeps every loss finite.
pub fn mixed_tasks(seed: u64, steps: usize) -> Verdict {
    let (_, mut model, ex) = fresh_unified(seed)?;
    let cfg = DownstreamConfig { seed, ..DownstreamConfig::toy(steps) };
    let log = train_downstream(&mut model, &ex, &cfg)?;
    let finite = log.rows.iter().all(|r| r.total.is_finite() && r.grad_norm.is_finite());
    let tts = log.rows.iter().filter(|r| r.task != "asr").count();
    let asr = log.rows.len() - tts;
    Ok((finite && tts > 0 && asr > 0, json!({ "steps": steps, "tts": tts, "asr": asr })))
}

/// Flag combinations: semantic-encoder freezing needs mean-pool mode, TTS
/// through a non-causal semantic encoder is refused, and DiT weights
/// transfer from a saved checkpoint.
pub fn ablation_flags(seed: u64) -> Verdict {
    let freeze = DownstreamConfig { freeze_semantic_encoder: true, ..DownstreamConfig::toy(10) };
    let refuse_freeze = freeze.validate(PatchMode::PatchEncoder).is_err() && freeze.validate(PatchMode::MeanPoolLinear).is_ok();

    let tok = Tokenizer::new("toy", EnrichConfig::default(), seed)?;
    let pooled = UnifiedConfig { patch_mode: PatchMode::MeanPoolLinear, ..UnifiedConfig::default() };
    let m = UnifiedModel::new(pooled.clone(), &tok, seed)?;
    let refuse_tts = m.check_tasks(Tasks::Tts).is_err() && m.check_tasks(Tasks::Asr).is_ok();
    let causal = Tokenizer::new("toy", EnrichConfig { causal_encoder: true, ..EnrichConfig::default() }, seed)?;
    let allow_tts = UnifiedModel::new(pooled, &causal, seed)?.check_tasks(Tasks::Unified).is_ok();

    let donor = UnifiedModel::new(UnifiedConfig::default(), &tok, seed + 1)?;
    let path = std::env::temp_dir().join(format!("holitok-dit-{}-{seed}.htok", std::process::id()));
    crate::pipeline::save_checkpoint(&donor.params, &path)?;
    let mut target = UnifiedModel::new(UnifiedConfig::default(), &tok, seed + 2)?;
    let copied = target.init_dit_from(&path);
    let _ = std::fs::remove_file(&path);
    let copied = copied?;
    let transferred = target.params.fingerprint("dit.") == donor.params.fingerprint("dit.")
        && target.params.fingerprint("ar.") != donor.params.fingerprint("ar.");
    let pass = refuse_freeze && refuse_tts && allow_tts && copied > 0 && transferred;
    Ok((pass, json!({ "freeze_needs_mean_pool": refuse_freeze, "tts_needs_causal_encoder": refuse_tts && allow_tts, "dit_tensors_copied": copied })))
}

pub fn layouts() -> Verdict {
    let text = [3, 1, 4];
    let tts = build_layout(LayoutTask::Tts, &text, 2, &[])?;
    let asr = build_layout(LayoutTask::Asr, &text, 2, &[])?;
    let desc = build_layout(LayoutTask::DescTts, &text, 2, &[16])?;
    let z = Tensor::new(vec![5, 2], (0..10).map(|v| v as f64).collect())?;
    let seq = patchify(&z, 4)?;
    let round = unpatchify(&seq)?;
    let pass = tts.audio_positions().len() == 2
        && asr.text_targets().iter().flatten().count() == text.len() + 1
        && desc.len() == tts.len() + 2
        && seq.patches.shape() == [2, 4, 2]
        && seq.patches.data()[10..].iter().all(|&v| v == 0.0)
        && round == z;
    Ok((pass, json!({ "tts": tts.trace(), "asr": asr.trace(), "desc_tts": desc.trace() })))
}

pub fn rates() -> Verdict {
    let paper = rate_info(&CodecConfig::paper());
    let toy = rate_info(&CodecConfig::toy());
    let mut wide = CodecConfig::toy();
    wide.latent_dim *= 2;
    let halved = rate_info(&wide).cr * num_rational::Ratio::from_integer(2) == toy.cr;
    let pass = paper.cr == num_rational::Ratio::new(15, 2)
        && paper.tps == num_rational::Ratio::from_integer(25)
        && toy.cr == num_rational::Ratio::new(13, 4)
        && halved;
    Ok((pass, json!({ "paper": paper.report(), "toy": toy.report(), "doubled_dim_halves": halved })))
}
