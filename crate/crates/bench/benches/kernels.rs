use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use percgan_bench::{bench_dataset, bench_state};
use percgan_core::training::{train_step, TrainConfig};
use percgan_core::{PerceptualVariant, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv(c: &mut Criterion) {
    let x = randn(&[16, 16, 16, 16], 1);
    let w = randn(&[32, 16, 4, 4], 2);
    c.bench_function("conv2d 16x16x16x16 -> 32, k4 s2 p1, forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            tape.conv2d(xv, wv, None, 2, 1).unwrap()
        })
    });
    c.bench_function("conv2d 16x16x16x16 -> 32, k4 s2 p1, forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
            let y = tape.conv2d(xv, wv, None, 2, 1).unwrap();
            let s = tape.sq_l2(y).unwrap();
            tape.backward(s).unwrap();
        })
    });
    let y = randn(&[16, 32, 8, 8], 3);
    let wt = randn(&[32, 16, 4, 4], 4);
    c.bench_function("conv_transpose2d 16x32x8x8 -> 16, k4 s2 p1, forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (yv, wv) = (tape.param(y.clone()), tape.param(wt.clone()));
            let x = tape.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
            let s = tape.sq_l2(x).unwrap();
            tape.backward(s).unwrap();
        })
    });
}

fn step(c: &mut Criterion) {
    let dir = tempfile::TempDir::new().unwrap();
    let dataset = bench_dataset(dir.path()).unwrap();
    for variant in [PerceptualVariant::None, PerceptualVariant::Gram] {
        let mut cfg = TrainConfig::default();
        cfg.loss.variant = variant;
        let fnet = cfg.feature_net().unwrap();
        let (state, index) = bench_state(&dataset, &cfg).unwrap();
        c.bench_function(&format!("train step, default config, {}", variant.flag()), |b| {
            b.iter_batched(
                || {
                    let mut s = state.clone();
                    let batch = s.next_batch(&dataset, &index, &cfg).unwrap();
                    (s, batch)
                },
                |(mut s, batch)| train_step(&mut s, &batch, &cfg, &fnet).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, step
}
criterion_main!(benches);
