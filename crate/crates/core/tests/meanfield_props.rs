use qmf_core::filtering::OneParticleModel;
use qmf_core::hilbert::{contract_kernel, hs_norm, presets, random};
use qmf_core::manybody::{ControlPolicy, Variant};
use qmf_core::meanfield::{solve_eta_closed, solve_eta_picard, step_limit_density, LimitModel, PicardOptions};
use qmf_core::noise::{sample_wiener, SeedSpec, TimeGrid};
use qmf_core::{CMatrix, DensityOp, Ket};

fn limit(control: ControlPolicy) -> LimitModel {
    let one = OneParticleModel::new(presets::pauli_z(), vec![presets::pauli_x()]).unwrap();
    let a = random::pair_kernel(&mut random::rng(2024), 2, 1.0);
    LimitModel::new(one, presets::pauli_x(), a, control).unwrap()
}

fn ground() -> DensityOp {
    Ket::basis(2, 0).unwrap().projector().unwrap()
}

#[test]
fn density_increment_has_zero_mean() {
    let m = limit(ControlPolicy::constant(0.5).unwrap());
    let g = random::density(&mut random::rng(3), 2, 1);
    let eta = random::density(&mut random::rng(4), 2, 2);
    let dt = 1e-3;
    let samples = 10_000;
    let grid = TimeGrid::new(samples as f64 * dt, dt).unwrap();
    let noise = sample_wiener(&grid, 1, SeedSpec::new(21, 0)).unwrap();
    let drift = step_limit_density(&g, &m, &eta, 0.5, &[0.0], dt).unwrap();
    let incs: Vec<CMatrix> = (0..samples)
        .map(|n| step_limit_density(&g, &m, &eta, 0.5, noise.dw(n), dt).unwrap().matrix() - drift.matrix())
        .collect();
    let k = samples as f64;
    for r in 0..2 {
        for c in 0..2 {
            for part in [|z: qmf_core::C64| z.re, |z: qmf_core::C64| z.im] {
                let xs: Vec<f64> = incs.iter().map(|m| part(m[(r, c)])).collect();
                let mean = xs.iter().sum::<f64>() / k;
                let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
                assert!(mean.abs() <= 4.0 * sd / k.sqrt() + 1e-15, "entry ({r},{c}): {mean} vs sd {sd}");
            }
        }
    }
}

#[test]
fn one_more_picard_iteration_stays_within_twice_the_tolerance() {
    let m = limit(ControlPolicy::feedback(0.5, presets::pauli_z()).unwrap());
    let grid = TimeGrid::new(0.25, 1e-3).unwrap();
    let opts = PicardOptions {
        ensemble: 200,
        tolerance: 1e-3,
        window: 0.25,
        max_iterations: 50,
        seed: 5,
        variant: Variant::Diffusive,
    };
    let (_, rep) = solve_eta_picard(&m, &grid, &ground(), &opts).unwrap();
    assert!(rep.converged());
    let k = rep.windows[0].distances.len();
    let longer = PicardOptions {
        tolerance: 1e-300,
        max_iterations: k + 1,
        ..opts
    };
    let (_, more) = solve_eta_picard(&m, &grid, &ground(), &longer).unwrap();
    let d = &more.windows[0].distances;
    assert_eq!(&d[..k], &rep.windows[0].distances[..]);
    assert!(d[k] <= 2.0 * opts.tolerance, "{d:?}");
}

#[test]
fn hartree_term_is_hermitian_along_the_curve() {
    let m = limit(ControlPolicy::feedback(0.5, presets::pauli_z()).unwrap());
    let grid = TimeGrid::new(0.5, 1e-3).unwrap();
    let opts = PicardOptions {
        ensemble: 100,
        ..PicardOptions::default()
    };
    let (curve, _) = solve_eta_picard(&m, &grid, &ground(), &opts).unwrap();
    for eta in curve.points() {
        assert!(contract_kernel(m.kernel(), eta).unwrap().is_hermitian(1e-12));
    }
}

#[test]
fn closed_curve_is_the_ensemble_mean() {
    let m = limit(ControlPolicy::constant(0.5).unwrap());
    let grid = TimeGrid::new(0.3, 1e-3).unwrap();
    let closed = solve_eta_closed(&m, 0.5, &grid, &ground()).unwrap();
    let paths = 400;
    let mut sum = vec![CMatrix::zeros(2, 2); grid.steps() + 1];
    let mut sum_sq = vec![0.0; grid.steps() + 1];
    for r in 0..paths {
        let noise = sample_wiener(&grid, 1, SeedSpec::new(31, r)).unwrap();
        let mut g = ground();
        for n in 0..=grid.steps() {
            sum[n] += g.matrix();
            sum_sq[n] += g.matrix().iter().map(|z| z.norm_sqr()).sum::<f64>();
            if n < grid.steps() {
                g = step_limit_density(&g, &m, closed.at(n), 0.5, noise.dw(n), grid.dt()).unwrap();
            }
        }
    }
    let k = paths as f64;
    for n in 0..=grid.steps() {
        let mean = sum[n].unscale(k);
        let var = (sum_sq[n] / k - mean.iter().map(|z| z.norm_sqr()).sum::<f64>()).max(0.0);
        let ci = 1.96 * (var / (k - 1.0)).sqrt();
        let gap = hs_norm(&(mean - closed.at(n).matrix()));
        // Euler for the mean ODE and for the ensemble differ at O(dt)
        assert!(gap <= 3.0 * ci + 1e-3, "step {n}: gap {gap}, ci {ci}");
    }
}
