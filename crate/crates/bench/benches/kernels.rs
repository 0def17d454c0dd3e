use criterion::{criterion_group, criterion_main, Criterion};
use sgareg_bench::{random_tensor, rng};
use sgareg_core::params::ConvParams;
use sgareg_core::sga::mrconv_sga;
use sgareg_core::{ConvOpts, GraphSpec, ParamStore, Tape};
use std::hint::black_box;

const C: usize = 8;
const N: usize = 16;

fn conv3d(c: &mut Criterion) {
    let x = random_tensor(&[1, C, N, N, N], 1);
    let w = random_tensor(&[C, C, 3, 3, 3], 2);
    c.bench_function("conv3d_3x3x3_8ch_16cube", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv3d(xv, wv, None, ConvOpts::same3()).unwrap();
            black_box(tape.value(y).data()[0])
        })
    });
}

fn mrconv(c: &mut Criterion) {
    let x = random_tensor(&[1, C, N, N, N], 3);
    let mut store = ParamStore::new();
    let conv = ConvParams::new(&mut store, "g", 2 * C, C, 1, ConvOpts::default(), &mut rng(4));
    let mut group = c.benchmark_group("mrconv_sga_16cube");
    for k in [1usize, 2, 4] {
        let spec = GraphSpec::new(k, [N; 3]).unwrap();
        group.bench_function(format!("k{k}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, false);
                let xv = tape.constant(x.clone());
                let y = mrconv_sga(&mut tape, xv, &spec, &conv, &p).unwrap();
                black_box(tape.value(y).data()[0])
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    use sgareg_core::network::{train_step, TrainPair};
    use sgareg_core::{Adam, NetworkConfig, RegistrationModel, Volume};
    let mut config = NetworkConfig::default();
    config.lncc_window = 5;
    let lr = config.lr;
    let mut model = RegistrationModel::new(config, 0).unwrap();
    let mut adam = Adam::new(lr);
    let dims = [N; 3];
    let pair = TrainPair {
        moving: Volume::new(dims, random_tensor(&[N * N * N], 5).into_data()).unwrap(),
        fixed: Volume::new(dims, random_tensor(&[N * N * N], 6).into_data()).unwrap(),
    };
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("train_step_16cube", |b| b.iter(|| black_box(train_step(&mut model, &mut adam, &pair).unwrap())));
    group.finish();
}

criterion_group!(benches, conv3d, mrconv, training_step);
criterion_main!(benches);
