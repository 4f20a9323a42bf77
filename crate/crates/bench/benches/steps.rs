use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use qmf_core::diagnostics::{lemma_a1_check, LemmaVariant};
use qmf_core::filtering::{step_density_diffusive, step_nonlinear_diffusive, OneParticleModel};
use qmf_core::hilbert::{presets, random};
use qmf_core::manybody::{step_npart_diffusive, ControlPolicy, ManyBodyModel};
use qmf_core::meanfield::{solve_eta_picard, LimitModel, PicardOptions};
use qmf_core::noise::TimeGrid;
use qmf_core::Ket;

fn one() -> OneParticleModel {
    OneParticleModel::new(presets::pauli_z(), vec![presets::pauli_x()]).unwrap()
}

fn one_particle(c: &mut Criterion) {
    let model = one();
    let psi = random::ket(&mut random::rng(1), 2);
    let gamma = psi.projector().unwrap();
    c.bench_function("ket_step", |b| b.iter(|| step_nonlinear_diffusive(black_box(&psi), &model, &[0.01], 1e-3).unwrap()));
    c.bench_function("density_step", |b| {
        b.iter(|| step_density_diffusive(black_box(&gamma), &model, &[0.01], 1e-3).unwrap())
    });
}

fn many_body(c: &mut Criterion) {
    let mut group = c.benchmark_group("npart_step");
    for n in [2usize, 4, 8] {
        let a = random::pair_kernel(&mut random::rng(2024), 2, 1.0);
        let control = ControlPolicy::feedback(0.5, presets::pauli_z()).unwrap();
        let model = ManyBodyModel::new(one(), presets::pauli_x(), a, n, control).unwrap();
        let psi = Ket::product(&vec![random::ket(&mut random::rng(3), 2); n]).unwrap();
        let db = vec![0.01; n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| step_npart_diffusive(black_box(&psi), &model, 0.0, &db, 1e-3).unwrap())
        });
    }
    group.finish();
}

fn lemma(c: &mut Criterion) {
    let mut rng = random::rng(4);
    let gamma = random::projector(&mut rng, 4);
    let big = random::density(&mut rng, 4, 4);
    let l = random::bounded(&mut rng, 4, 1.0);
    c.bench_function("lemma_general_d4", |b| {
        b.iter(|| lemma_a1_check(black_box(&gamma), &big, &l, LemmaVariant::General).unwrap())
    });
}

fn picard(c: &mut Criterion) {
    let a = random::pair_kernel(&mut random::rng(2024), 2, 1.0);
    let control = ControlPolicy::feedback(0.5, presets::pauli_z()).unwrap();
    let model = LimitModel::new(one(), presets::pauli_x(), a, control).unwrap();
    let grid = TimeGrid::new(0.1, 1e-3).unwrap();
    let gamma0 = random::ket(&mut random::rng(3), 2).projector().unwrap();
    let opts = PicardOptions {
        ensemble: 100,
        window: 0.1,
        ..PicardOptions::default()
    };
    let mut group = c.benchmark_group("picard");
    group.sample_size(10);
    group.bench_function("m100_t0.1", |b| b.iter(|| solve_eta_picard(&model, &grid, &gamma0, &opts).unwrap()));
    group.finish();
}

criterion_group!(benches, one_particle, many_body, lemma, picard);
criterion_main!(benches);
