use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use holitok::enrich::EnrichConfig;
use holitok::pipeline::Tokenizer;
use holitok_bench::tone;

fn toy(c: &mut Criterion) {
    let tok = Tokenizer::new("toy", EnrichConfig::default(), 0).unwrap();
    let x = tone(8000);
    let lf = tok.encode_waveform(&x, 8000).unwrap();
    c.bench_function("toy_encode_1s", |b| b.iter(|| black_box(tok.encode_waveform(&x, 8000).unwrap())));
    c.bench_function("toy_decode_1s", |b| b.iter(|| black_box(tok.decode_latents(&lf).unwrap())));
}

fn paper(c: &mut Criterion) {
    let tok = Tokenizer::new("paper", EnrichConfig::default(), 0).unwrap();
    let x = tone(48000);
    let lf = tok.encode_waveform(&x, 48000).unwrap();
    let mut g = c.benchmark_group("paper");
    g.sample_size(10).measurement_time(Duration::from_secs(30));
    g.bench_function("encode_1s", |b| b.iter(|| black_box(tok.encode_waveform(&x, 48000).unwrap())));
    g.bench_function("decode_1s", |b| b.iter(|| black_box(tok.decode_latents(&lf).unwrap())));
    g.finish();
}

criterion_group!(benches, toy, paper);
criterion_main!(benches);
