use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hyperlb::ctmc::{build_generator, stationary};
use hyperlb::des::{run, SimConfig};
use hyperlb::fluid_async::{integrate_async, rhs_async, AsyncOptions};
use hyperlb::fluid_sync::{integrate_sync, rhs_sync, SyncOptions};
use hyperlb::model::default_jmax;
use hyperlb::{FixedPoint, FluidState, ModelParams, PolicySpec};

fn fluid(c: &mut Criterion) {
    let fp = FixedPoint::compute(0.7, 0.85).unwrap();
    c.bench_function("rhs_async at fixed point", |b| {
        b.iter(|| rhs_async(black_box(&fp.y_star), 0.7, 0.85).unwrap())
    });
    c.bench_function("rhs_sync at fixed point", |b| {
        b.iter(|| rhs_sync(black_box(&fp.y_star), 0.7).unwrap())
    });
    let empty = FluidState::empty(default_jmax(0.7, 0.85));
    c.bench_function("integrate_async t=10", |b| {
        b.iter(|| integrate_async(&empty, 0.7, 0.85, 10.0, AsyncOptions::for_delta(0.85)).unwrap())
    });
    c.bench_function("integrate_sync t=10", |b| {
        b.iter(|| integrate_sync(&empty, 0.7, 0.85, 10.0, SyncOptions::for_delta(0.85)).unwrap())
    });
}

fn fixed_point(c: &mut Criterion) {
    c.bench_function("fixed point (0.7, 0.1)", |b| {
        b.iter(|| FixedPoint::compute(black_box(0.7), black_box(0.1)).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("des");
    group.sample_size(10);
    for policy in [
        PolicySpec::SujsqDet { delta: 0.85 },
        PolicySpec::AujsqExp { delta: 0.85 },
        PolicySpec::JsqD { d: 2 },
        PolicySpec::JiqP { p: 0.5 },
    ] {
        let cfg = SimConfig::new(ModelParams::new(1000, 0.7, 0.85).unwrap(), policy, 20.0, 1);
        group.bench_function(policy.to_string(), |b| {
            b.iter(|| run(black_box(&cfg)).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let params = ModelParams::new(2, 0.7, 0.85).unwrap();
    let chain = build_generator(&params, &PolicySpec::AujsqExp { delta: 0.85 }, 8).unwrap();
    c.bench_function("ctmc stationary N=2 cap=8", |b| {
        b.iter(|| stationary(&chain).unwrap())
    });
}

criterion_group!(benches, fluid, fixed_point, simulation, oracle);
criterion_main!(benches);
