use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use poredit::diffusion::{GuidanceSpec, NoiseSchedule, SampleMode};
use poredit::lbm::LbmState;
use poredit::metrics;
use poredit::network::{Condition, Conditioned};
use poredit::tensor::{Graph, Tensor};
use poredit::tiling::{plan_tiles, tiled_step, NoiseField, NoiseMode};
use poredit::volume::SignedVolume;
use poredit_bench::{desk_model, grf, percolating_grf, tokens};

fn attention(c: &mut Criterion) {
    let m = desk_model();
    let cfg = m.config().clone();
    let h = Tensor::new(vec![cfg.tokens(), cfg.embed_dim], tokens(cfg.tokens(), cfg.embed_dim)).unwrap();
    let mut group = c.benchmark_group("attention");
    for layer in [0, 1] {
        group.bench_with_input(BenchmarkId::new("window", layer), &layer, |b, &l| {
            b.iter(|| {
                let mut g = Graph::new();
                let bound = m.bind(&mut g, false);
                let hv = g.constant(h.clone());
                m.attention(&mut g, &bound, l, hv).unwrap()
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let m = desk_model();
    let x = tokens(64 * 64 * 64, 1);
    let cond = Condition {
        t: 500,
        phi_norm: 0.0,
        s2: None,
    };
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("predict 64^3", |b| b.iter(|| m.predict(&x, &cond, false).unwrap()));
    group.finish();
}

fn tiling(c: &mut Criterion) {
    let m = desk_model();
    let den = Conditioned::new(&m, 0.0);
    let sched = NoiseSchedule::cosine(1000, 0.008).unwrap().respace(50).unwrap();
    let dims = [96, 96, 96];
    let plan = plan_tiles(dims, 64, 16).unwrap();
    let x = SignedVolume::new(dims, tokens(96 * 96 * 96, 1)).unwrap();
    let noise = NoiseField {
        mode: NoiseMode::Coherent,
        seed: 0,
        dims,
    };
    let mut group = c.benchmark_group("tiling");
    group.sample_size(10);
    group.bench_function("step 96^3", |b| {
        b.iter(|| tiled_step(&x, 25, &den, &plan, &noise, &sched, SampleMode::Ancestral, &GuidanceSpec::default()).unwrap())
    });
    group.finish();
}

fn lbm(c: &mut Criterion) {
    let v = percolating_grf(64, 0.25);
    let mut st = LbmState::new(&v, Some(0), 1.001, 0.999);
    let mut group = c.benchmark_group("lbm");
    group.bench_function("step 64^3", |b| b.iter(|| st.step(1.0, 1.001, 0.999).unwrap()));
    group.finish();
}

fn morphology(c: &mut Criterion) {
    let v = grf(64, 0.25, 3);
    let mut group = c.benchmark_group("metrics");
    group.bench_function("s2 radial 64^3", |b| b.iter(|| metrics::s2_radial(&v)));
    group.bench_function("euler 64^3", |b| b.iter(|| metrics::euler_characteristic(&v)));
    group.bench_function("labels 64^3", |b| b.iter(|| metrics::label_pores(&v)));
    group.finish();
}

criterion_group!(benches, attention, forward, tiling, lbm, morphology);
criterion_main!(benches);
