use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sgareg_bench::{random_tensor, rng};
use sgareg_core::ssaformer::{mha_reference, ssa, MhaParams, SsaParams};
use sgareg_core::{ParamStore, Tape};
use std::hint::black_box;

const D: usize = 64;

fn token_mixers(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let ssa_p = SsaParams::new(&mut store, "ssa", D, D, &mut r);
    let mha_p = MhaParams::new(&mut store, "mha", D, 1, &mut r).unwrap();
    let mut group = c.benchmark_group("token_mixer");
    group.sample_size(10);
    for k in [256usize, 512, 1024] {
        let tokens = random_tensor(&[k, D], k as u64);
        group.bench_with_input(BenchmarkId::new("ssa", k), &tokens, |b, t| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, false);
                let h = tape.constant(t.clone());
                let out = ssa(&mut tape, h, &ssa_p, &p).unwrap();
                black_box(tape.value(out).data()[0])
            })
        });
        group.bench_with_input(BenchmarkId::new("mha", k), &tokens, |b, t| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, false);
                let h = tape.constant(t.clone());
                let out = mha_reference(&mut tape, h, &mha_p, &p).unwrap();
                black_box(tape.value(out).data()[0])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, token_mixers);
criterion_main!(benches);
