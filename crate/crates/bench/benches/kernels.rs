use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use idmorph::cnc::Cnc;
use idmorph::params::{Mode, ParamStore};
use idmorph::synthdata::render_dataset;
use idmorph::training::Trainer;
use idmorph::Graph;
use idmorph_bench::{random, smoke_config};

fn conv2d(c: &mut Criterion) {
    let x = random(&[8, 32, 32, 32], 1);
    let w = random(&[32, 32, 3, 3], 2);
    let b = random(&[32], 3);
    c.bench_function("conv2d_fwd_bwd_8x32x32x32_k3", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (vx, vw, vb) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
            let y = g.conv2d(vx, vw, Some(vb), 1, 1).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
        })
    });
}

fn cnc_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("cnc_forward_8x32x16x16");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let x = random(&[8, 32, 16, 16], 4);
    let y = random(&[8, 32, 16, 16], 5);
    for radius in [1usize, 2, 4] {
        let cnc = Cnc::new(
            &mut store,
            &format!("r{radius}"),
            32,
            32,
            16,
            radius,
            &mut rng,
        );
        group.bench_with_input(BenchmarkId::new("radius", radius), &cnc, |bench, cnc| {
            bench.iter(|| {
                let mut g = Graph::new();
                let p = store.bind(&mut g, Mode::Eval, false);
                let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
                cnc.forward(&mut g, &p, vx, vy).unwrap()
            })
        });
    }
    let cnc = Cnc::new(&mut store, "global", 32, 32, 16, 0, &mut rng);
    group.bench_function("global", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, Mode::Eval, false);
            let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
            cnc.forward_global(&mut g, &p, vx, vy).unwrap()
        })
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let data = render_dataset(8, 2, 0, 64).unwrap();
    let mut group = c.benchmark_group("smoke_step");
    group.sample_size(10);
    let mut trainer = Trainer::<f32>::new(smoke_config(32)).unwrap();
    let batch = trainer.sample_batch(&data);
    group.bench_function("g_step_batch32", |bench| {
        bench.iter(|| trainer.gan.g_step(&batch, 5.0).unwrap())
    });
    group.bench_function("d_step_batch32", |bench| {
        bench.iter(|| trainer.gan.d_step(&batch, 5.0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv2d, cnc_forward, train_step);
criterion_main!(benches);
