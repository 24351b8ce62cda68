use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use smm_core::estimator::{fit_2sgmm_logistic, fit_model};
use smm_core::late::{decompose, DecompositionForm};
use smm_core::numerics::RngStream;
use smm_core::simulate::SimDesign;
use smm_core::{EstimationData, InstrumentSpec, ModelKind};

fn data(design: &SimDesign, n: usize) -> (smm_core::Dataset, EstimationData) {
    let ds = design.draw(n, &mut RngStream::new(1, 0)).unwrap();
    let data = EstimationData::new(&ds, &InstrumentSpec::indicators(ds.levels())).unwrap();
    (ds, data)
}

fn fits(c: &mut Criterion) {
    let mut group = c.benchmark_group("two_step_fit");
    for n in [1_000, 10_000] {
        let (_, m1) = data(&SimDesign::m1(), n);
        let (_, m2) = data(&SimDesign::m2(), n);
        for kind in [ModelKind::Additive, ModelKind::MultMmom0, ModelKind::MultMmomc] {
            group.bench_with_input(BenchmarkId::new(kind.name(), n), &m1, |b, d| {
                b.iter(|| fit_model(kind, black_box(d), 2).unwrap())
            });
        }
        group.bench_with_input(BenchmarkId::new("logistic_joint", n), &m2, |b, d| {
            b.iter(|| fit_model(ModelKind::LogisticJoint, black_box(d), 2).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("logistic_2sgmm", n), &m2, |b, d| {
            b.iter(|| fit_2sgmm_logistic(black_box(d), 2).unwrap())
        });
    }
    group.finish();
}

fn draws(c: &mut Criterion) {
    c.bench_function("draw_m2_10000", |b| {
        let design = SimDesign::m2();
        b.iter(|| design.draw(10_000, &mut RngStream::new(2, 0)).unwrap())
    });
}

fn decompositions(c: &mut Criterion) {
    let (ds, _) = data(&SimDesign::probit_late(), 40_000);
    c.bench_function("lrr_decomposition_40000", |b| {
        b.iter(|| decompose(black_box(&ds), DecompositionForm::Lrr).unwrap())
    });
}

criterion_group!(benches, fits, draws, decompositions);
criterion_main!(benches);
