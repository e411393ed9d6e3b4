use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_holitok");

fn holitok(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn holitok")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn report_cr_prints_exact_ratio() {
    let out = holitok(&["report-cr", "--preset", "paper", "--json"]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["cr_exact"], "15/2");
    let out = holitok(&["report-cr", "--preset", "paper", "--latent-dim", "64", "--json"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["cr_exact"], "15");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(holitok(&["verify", "nope"]).status.code(), Some(2));
    assert_eq!(holitok(&["report-cr", "--preset", "huge"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = holitok(&["train", "tokenizer", "--stage", "2", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 1 checkpoint required before stage 2"));
}

#[test]
fn tokenizer_training_and_codec_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "steps": 2, "corpus_size": 2 }"#).unwrap();
    let out = holitok(&["train", "tokenizer", "--stage", "1", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["tokenizer_stage1.htok", "stage1_log.csv", "stage1_run_config.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }

    let ckpt = dir.path().join("tokenizer_stage1.htok");
    let wav = dir.path().join("in.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&wav, spec).unwrap();
    for i in 0..8000 {
        w.write_sample(((i as f64 * 0.1).sin() * 8000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
    let lat = dir.path().join("x.lat");
    let back = dir.path().join("out.wav");
    assert!(holitok(&["codec", "encode", "--checkpoint", s(&ckpt), s(&wav), s(&lat)]).status.success());
    assert!(holitok(&["codec", "decode", "--checkpoint", s(&ckpt), s(&lat), s(&back)]).status.success());
    let r = hound::WavReader::open(&back).unwrap();
    assert_eq!(r.spec().sample_rate, 8000);
    assert_eq!(r.len(), 8000);

    let spec = hound::WavSpec { sample_rate: 16000, ..spec };
    let wrong = dir.path().join("wrong.wav");
    let mut w = hound::WavWriter::create(&wrong, spec).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    assert_eq!(holitok(&["codec", "encode", "--checkpoint", s(&ckpt), s(&wrong), s(&lat)]).status.code(), Some(2));
}
