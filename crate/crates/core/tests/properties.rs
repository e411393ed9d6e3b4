use holitok::codec::kl_closed_form;
use holitok::dsp::corpus::{format_symbols, parse_symbols};
use holitok::dsp::mel::{mel_distance, toy_scales};
use holitok::numerics::{Conv1dSpec, ParameterSet, Tensor, Var};
use holitok::pipeline::checkpoint::{decode_checkpoint, encode_checkpoint};
use holitok::enrich::EnrichConfig;
use holitok::pipeline::{LatentFile, LrSchedule, Tokenizer};
use holitok::rates::{ceil_log2, rate_info};
use holitok::unified::{build_layout, patchify, unpatchify, LayoutTask};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ceil_log2_brackets_n(n in 1u64..1_000_000_000) {
        let k = ceil_log2(n);
        prop_assert!(1u64 << k >= n);
        prop_assert!(k == 0 || 1u64 << (k - 1) < n);
    }

    #[test]
    fn compression_ratio_is_inverse_in_latent_dim(d in 1usize..512, m in 1usize..8) {
        let mut a = holitok::codec::CodecConfig::toy();
        a.latent_dim = d;
        let mut b = a.clone();
        b.latent_dim = d * m;
        let (ra, rb) = (rate_info(&a), rate_info(&b));
        prop_assert_eq!(rb.cr * num_rational::Ratio::from_integer(m as u64), ra.cr);
        prop_assert_eq!(ra.tps, rb.tps);
    }

    #[test]
    fn patches_round_trip(t in 1usize..40, d in 1usize..6, p in 1usize..7, seed in any::<u64>()) {
        let data: Vec<f64> = (0..t * d).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
        let z = tensor(vec![t, d], data);
        let seq = patchify(&z, p).unwrap();
        prop_assert_eq!(seq.patches.shape(), &[t.div_ceil(p), p, d][..]);
        prop_assert!(seq.patches.data()[t * d..].iter().all(|&v| v == 0.0));
        prop_assert_eq!(unpatchify(&seq).unwrap(), z);
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(values in prop::collection::vec(any::<f64>(), 1..64), split in 0usize..64) {
        let split = split % values.len();
        let mut ps = ParameterSet::new();
        ps.insert("a.weight", tensor(vec![split], values[..split].to_vec())).unwrap();
        ps.insert("b.bias", tensor(vec![values.len() - split], values[split..].to_vec())).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&ps)).unwrap();
        for ((na, ta), (nb, tb)) in ps.iter().zip(back.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn truncated_checkpoints_are_rejected(values in prop::collection::vec(-1e3f64..1e3, 1..32), cut in 1usize..10_000) {
        let mut ps = ParameterSet::new();
        ps.insert("w", tensor(vec![values.len()], values)).unwrap();
        let bytes = encode_checkpoint(&ps);
        let cut = cut % bytes.len();
        prop_assert!(decode_checkpoint(&bytes[..cut]).is_err());
    }

    #[test]
    fn latent_files_round_trip(frames in 0usize..20, d in 1usize..10, rate in 1u32..1000, seed in any::<u32>()) {
        let data: Vec<f64> = (0..frames * d).map(|i| ((i as u32 ^ seed) % 997) as f32 as f64 / 13.0).collect();
        let data: Vec<f64> = data.into_iter().map(|v| v as f32 as f64).collect();
        let lf = LatentFile { frame_rate: rate, latent_dim: d as u32, frames: tensor(vec![frames, d], data) };
        let bytes = lf.encode();
        prop_assert_eq!(LatentFile::decode(&bytes).unwrap(), lf);
        prop_assert!(LatentFile::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn closed_form_kl_is_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 8), ls in prop::collection::vec(-2.0f64..1.0, 8)) {
        prop_assert!(kl_closed_form(&mu, &ls, 4) >= 0.0);
        prop_assert_eq!(kl_closed_form(&[0.0; 8], &[0.0; 8], 4), 0.0);
    }

    #[test]
    fn cosine_schedule_stays_in_range(warmup in 0u64..50, extra in 1u64..500, step in 0i64..600) {
        let s = LrSchedule::Cosine { lr0: 1e-3, warmup, total: warmup + extra, min_lr: 1e-5 };
        let lr = s.at(step).unwrap();
        prop_assert!((0.0..=1e-3 + 1e-15).contains(&lr), "lr {lr}");
        if step as u64 >= warmup {
            prop_assert!(lr >= 1e-5 - 1e-15);
        }
    }

    #[test]
    fn layouts_share_the_tts_suffix(text in prop::collection::vec(0u32..16, 1..12), patches in 1usize..10, desc in 16u32..18) {
        let tts = build_layout(LayoutTask::Tts, &text, patches, &[]).unwrap();
        let with_desc = build_layout(LayoutTask::DescTts, &text, patches, &[desc]).unwrap();
        prop_assert_eq!(&with_desc.tokens[2..], &tts.tokens[..]);
        prop_assert_eq!(tts.audio_positions().len(), patches);
        let asr = build_layout(LayoutTask::Asr, &text, patches, &[]).unwrap();
        let targets: Vec<usize> = asr.text_targets().into_iter().flatten().collect();
        prop_assert_eq!(targets.len(), text.len() + 1);
        prop_assert!(targets[..text.len()].iter().zip(&text).all(|(&a, &b)| a == b as usize));
    }

    #[test]
    fn symbol_text_round_trips(symbols in prop::collection::vec(0u32..16, 1..40)) {
        prop_assert_eq!(parse_symbols(&format_symbols(&symbols)).unwrap(), symbols);
    }

    #[test]
    fn causal_conv_ignores_the_future(k in 1usize..6, s in 1usize..4, d in 1usize..4, n in 8usize..48, at in 0usize..48, seed in any::<u64>()) {
        let at = at % n;
        let noise = |i: usize| (((i as u64 + 1).wrapping_mul(seed | 1) >> 11) % 1000) as f64 / 500.0 - 1.0;
        let x: Vec<f64> = (0..2 * n).map(noise).collect();
        let w = Var::constant(tensor(vec![3, 2, k], (0..6 * k).map(|i| noise(i + 7)).collect()));
        let spec = Conv1dSpec::causal(k, s, d);
        let y0 = Var::constant(tensor(vec![1, 2, n], x.clone())).conv1d(&w, None, spec).unwrap();
        let mut x1 = x;
        x1[at] += 1.0;
        x1[n + at] -= 1.0;
        let y1 = Var::constant(tensor(vec![1, 2, n], x1)).conv1d(&w, None, spec).unwrap();
        let t_out = y0.shape()[2];
        for c in 0..3 {
            for j in (0..t_out).filter(|j| j * s < at) {
                prop_assert_eq!(y0.value().data()[c * t_out + j], y1.value().data()[c * t_out + j]);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let p = Var::constant(tensor(vec![3, 4], vals)).softmax_last().unwrap();
        for row in p.value().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn codec_output_is_whole_frames(n in 1usize..700) {
        let tok = Tokenizer::new("toy", EnrichConfig::default(), 0).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.05).sin() * 0.2).collect();
        let lf = tok.encode_waveform(&x, 8000).unwrap();
        prop_assert_eq!(lf.frames.shape()[0], n.div_ceil(64));
        prop_assert_eq!(tok.decode_latents(&lf).unwrap().len(), n.div_ceil(64) * 64);
    }

    #[test]
    fn mel_distance_is_a_symmetric_premetric(seed in any::<u64>(), gain in 0.1f64..2.0) {
        let x: Vec<f64> = (0..1024).map(|i| ((i as f64 * 0.37 + (seed % 100) as f64).sin()) * 0.3).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * gain + 0.01 * (i as f64 * 1.3).cos()).collect();
        let scales = toy_scales();
        prop_assert_eq!(mel_distance(&x, &x, &scales).unwrap(), 0.0);
        let (a, b) = (mel_distance(&x, &y, &scales).unwrap(), mel_distance(&y, &x, &scales).unwrap());
        prop_assert!(a > 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}
