use std::hint::black_box;
use std::rc::Rc;

use criterion::{criterion_group, criterion_main, Criterion};
use holitok::dsp::mel::{multiscale_mel_loss, toy_scales};
use holitok::numerics::{attention, Conv1dSpec, Tensor, Var};
use holitok_bench::{leaf, tone};

fn conv(c: &mut Criterion) {
    let x = leaf::<f32>(&[4, 32, 1024], 1.0, 0);
    let w = leaf::<f32>(&[32, 32, 7], 0.1, 1);
    let b = leaf::<f32>(&[32], 0.1, 2);
    let spec = Conv1dSpec::causal(7, 1, 3);
    c.bench_function("conv1d_forward_backward", |bench| {
        bench.iter(|| {
            let y = x.conv1d(&w, Some(&b), spec).unwrap();
            y.square().unwrap().mean().unwrap().backward().unwrap();
            black_box(y)
        })
    });
}

fn lstm(c: &mut Criterion) {
    let x = leaf::<f32>(&[2, 125, 64], 1.0, 0);
    let w_ih = leaf::<f32>(&[64, 256], 0.1, 1);
    let w_hh = leaf::<f32>(&[64, 256], 0.1, 2);
    let bias = leaf::<f32>(&[256], 0.1, 3);
    c.bench_function("lstm_forward_backward", |bench| {
        bench.iter(|| {
            let y = x.lstm_layer(&w_ih, &w_hh, &bias).unwrap();
            y.mean().unwrap().backward().unwrap();
            black_box(y)
        })
    });
}

fn causal_attention(c: &mut Criterion) {
    let (t, d) = (128, 128);
    let q = leaf::<f32>(&[1, t, d], 1.0, 0);
    let k = leaf::<f32>(&[1, t, d], 1.0, 1);
    let v = leaf::<f32>(&[1, t, d], 1.0, 2);
    let mask = Rc::new((0..t * t).map(|i| i % t <= i / t).collect::<Vec<_>>());
    c.bench_function("causal_attention_forward_backward", |bench| {
        bench.iter(|| {
            let y = attention(&q, &k, &v, 4, Some(mask.clone())).unwrap();
            y.mean().unwrap().backward().unwrap();
            black_box(y)
        })
    });
}

fn mel(c: &mut Criterion) {
    let x = Var::constant(Tensor::new(vec![1, 8000], tone(8000).iter().map(|&v| v as f32).collect()).unwrap());
    let y = Var::leaf(x.value().map(|v| v * 0.9), true).unwrap();
    let scales = toy_scales();
    c.bench_function("multiscale_mel_loss_1s", |bench| {
        bench.iter(|| {
            let l = multiscale_mel_loss(&x, &y, &scales).unwrap();
            l.backward().unwrap();
            black_box(l)
        })
    });
}

criterion_group!(benches, conv, lstm, causal_attention, mel);
criterion_main!(benches);
