use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use xmodal_bench::{desk, unit_rows, wave};
use xmodal_core::data::make_batch;
use xmodal_core::losses::{cross_cl_terms, LossConfig};
use xmodal_core::nn::{MultiHeadAttention, ParamStore};
use xmodal_core::optim::AdamW;
use xmodal_core::train::init_model;
use xmodal_core::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = wave(&[n, n], 0.1);
        let b = wave(&[n, n], 0.7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
                black_box(out.value())
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (batch, len, d) = (16, 17, 32);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mha = MultiHeadAttention::new(&mut store, "mha", d, 4, &mut rng).unwrap();
    let x = wave(&[batch, len, d], 0.3);
    c.bench_function("attention/forward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            let xv = tape.constant(x.clone());
            black_box(mha.forward(&p, xv, xv, None).unwrap().value())
        })
    });
    c.bench_function("attention/forward_backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let xv = tape.leaf(x.clone());
            let loss = mha.forward(&p, xv, xv, None).unwrap().sum();
            tape.backward(loss).unwrap();
            black_box(tape.grad(xv))
        })
    });
}

fn cross_cl(c: &mut Criterion) {
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("cross_cl");
    for n in [16, 64] {
        let vision = unit_rows(n, 16, 0.2);
        let language = unit_rows(n, 16, 1.1);
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let v = tape.leaf(vision.clone());
                let l = tape.leaf(language.clone());
                let terms = cross_cl_terms(v, l, &labels, &cfg).unwrap();
                tape.backward(terms.total).unwrap();
                black_box(tape.grad(v))
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (cfg, corpus) = desk();
    let mut model = init_model(&cfg, &corpus).unwrap();
    let mut optimizer = AdamW::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("train_step/desk", |bench| {
        bench.iter(|| {
            let batch = make_batch(&corpus.train, cfg.batch_size, &mut rng).unwrap();
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let terms = model.loss(&p, &tape, &batch, &cfg.loss).unwrap();
            tape.backward(terms.total).unwrap();
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| tape.grad(v)).collect();
            drop(p);
            optimizer.step(&mut model.params, &grads, 1e-4).unwrap();
            black_box(terms.total.item())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, attention, cross_cl, train_step
}
criterion_main!(benches);
