use proptest::prelude::*;

use qmf_core::filtering::OneParticleModel;
use qmf_core::hilbert::{presets, random};
use qmf_core::manybody::{
    reduced_density, simulate, step_npart_counting_unitary, step_npart_diffusive, ControlPolicy, ManyBodyModel, Variant,
};
use qmf_core::noise::{sample_unit_poisson, sample_wiener, SeedSpec, TimeGrid};
use qmf_core::{BoundedOp, Ket, TensorLayout, C64};

fn model(l: BoundedOp, n: usize, seed: u64, control: ControlPolicy) -> ManyBodyModel {
    let one = OneParticleModel::new(presets::pauli_z(), vec![l]).unwrap();
    let a = random::pair_kernel(&mut random::rng(seed), 2, 1.0);
    ManyBodyModel::new(one, presets::pauli_x(), a, n, control).unwrap()
}

fn feedback() -> ControlPolicy {
    ControlPolicy::feedback(0.5, presets::pauli_z()).unwrap()
}

/// Relabels tensor factors: factor `j` of the output is factor `perm[j]` of the input.
fn permute(psi: &Ket, layout: &TensorLayout, perm: &[usize]) -> Ket {
    let n = layout.n();
    let mut out = vec![C64::new(0.0, 0.0); layout.total()];
    for (idx, amp) in psi.as_slice().iter().enumerate() {
        let mut target = 0;
        for j in 0..n {
            // input digit of factor perm[j] becomes output digit j
            let digit = layout.digit(idx, perm[j]);
            target += digit * layout.stride(j);
        }
        out[target] = *amp;
    }
    Ket::from_slice(&out).unwrap()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn diffusive_step_is_permutation_equivariant(seed in any::<u64>(), rot in 1usize..3, dbs in proptest::collection::vec(-0.05f64..0.05, 3)) {
        let m = model(presets::pauli_x(), 3, seed, feedback());
        let psi = random::ket(&mut random::rng(seed ^ 7), 8);
        let perm: Vec<usize> = (0..3).map(|j| (j + rot) % 3).collect();
        let permuted_db: Vec<f64> = perm.iter().map(|&p| dbs[p]).collect();
        let direct = step_npart_diffusive(&psi, &m, 0.0, &dbs, 1e-3).unwrap();
        let via = step_npart_diffusive(&permute(&psi, m.layout(), &perm), &m, 0.0, &permuted_db, 1e-3).unwrap();
        let back = permute(&via, m.layout(), &inverse(&perm));
        prop_assert!((back.amplitudes() - direct.amplitudes()).camax() <= 1e-13);
    }

    #[test]
    fn counting_step_is_permutation_equivariant(seed in any::<u64>(), hit in 0usize..3) {
        let l = BoundedOp::unitary_exp(&presets::pauli_x(), 0.7).unwrap();
        let m = model(l, 3, seed, feedback());
        let psi = random::ket(&mut random::rng(seed ^ 9), 8);
        let perm = vec![1, 2, 0];
        let mut jumps = vec![0u32; 3];
        jumps[hit] = 1;
        let permuted: Vec<u32> = perm.iter().map(|&p| jumps[p]).collect();
        let direct = step_npart_counting_unitary(&psi, &m, 0.0, &jumps, 1e-3).unwrap();
        let via = step_npart_counting_unitary(&permute(&psi, m.layout(), &perm), &m, 0.0, &permuted, 1e-3).unwrap();
        let back = permute(&via, m.layout(), &inverse(&perm));
        prop_assert!((back.amplitudes() - direct.amplitudes()).camax() <= 1e-13);
    }
}

#[test]
fn permutation_helper_moves_factors() {
    let layout = TensorLayout::new(2, 3).unwrap();
    let e = |i| Ket::basis(2, i).unwrap();
    let psi = Ket::product(&[e(0), e(1), e(1)]).unwrap();
    let moved = permute(&psi, &layout, &[1, 2, 0]);
    assert_eq!(moved, Ket::product(&[e(1), e(1), e(0)]).unwrap());
}

#[test]
fn marginal_laws_are_exchangeable() {
    let n = 3;
    let m = model(presets::pauli_x(), n, 2024, feedback());
    let grid = TimeGrid::new(0.2, 1e-3).unwrap();
    let psi0 = Ket::product(&vec![Ket::basis(2, 0).unwrap(); n]).unwrap();
    let trajectories = 200;
    let sz = presets::pauli_z();
    let mut samples = vec![Vec::new(); n];
    for r in 0..trajectories {
        let noise = sample_wiener(&grid, n, SeedSpec::new(12, r)).unwrap();
        let rec = simulate(&psi0, &m, &noise, Variant::Diffusive, true).unwrap();
        for (j, s) in samples.iter_mut().enumerate() {
            let g = reduced_density(&rec.final_state, &m, j).unwrap();
            s.push((g.matrix() * sz.matrix()).trace().re);
        }
    }
    let stats: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| {
            let k = s.len() as f64;
            let mean = s.iter().sum::<f64>() / k;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (mean, 1.96 * (var / k).sqrt())
        })
        .collect();
    for a in 0..n {
        for b in (a + 1)..n {
            let (ma, ca) = stats[a];
            let (mb, cb) = stats[b];
            assert!((ma - mb).abs() <= 2.0 * (ca + cb), "particles {a},{b}: {stats:?}");
        }
    }
}

#[test]
fn diffusive_norm_drift_is_first_order() {
    let grid = TimeGrid::new(1.0, 1e-3).unwrap();
    for n in [2usize, 4, 8] {
        let m = model(presets::pauli_x(), n, 1, feedback());
        let psi0 = Ket::product(&vec![Ket::basis(2, 0).unwrap(); n]).unwrap();
        let noise = sample_wiener(&grid, n, SeedSpec::new(13, n as u64)).unwrap();
        let rec = simulate(&psi0, &m, &noise, Variant::Diffusive, false).unwrap();
        // O(dt) per particle channel
        assert!(rec.max_norm_drift() <= 20.0 * n as f64 * grid.dt(), "N={n}: {}", rec.max_norm_drift());
    }
}

#[test]
fn unitary_counting_norm_is_exact_between_renormalizations() {
    let l = BoundedOp::unitary_exp(&presets::pauli_x(), 0.7).unwrap();
    let m = model(l, 4, 3, feedback());
    let grid = TimeGrid::new(0.5, 1e-3).unwrap();
    let psi0 = Ket::product(&vec![Ket::basis(2, 0).unwrap(); 4]).unwrap();
    let noise = sample_unit_poisson(&grid, 4, SeedSpec::new(14, 0)).unwrap();
    let mut psi = psi0;
    for step in 0..grid.steps() {
        let before = psi.norm();
        let jumps = noise.jumps(step);
        let drift_only = vec![0u32; 4];
        let next = step_npart_counting_unitary(&psi, &m, grid.time(step), &drift_only, grid.dt()).unwrap();
        // the Euler drift grows the norm by O(dt²) per step only
        assert!((next.norm() / before - 1.0).abs() <= grid.dt() * grid.dt() * 10.0);
        let jumped = step_npart_counting_unitary(&psi, &m, grid.time(step), jumps, grid.dt()).unwrap();
        if jumps.iter().any(|&k| k > 0) {
            // the jump itself is a unitary factor
            assert!((jumped.norm() - next.norm()).abs() <= 1e-14);
        }
        psi = jumped.normalized().unwrap();
    }
}

#[test]
fn feedback_controls_stay_in_bounds() {
    let m = model(presets::pauli_x(), 3, 4, ControlPolicy::feedback(0.3, presets::pauli_z()).unwrap());
    let grid = TimeGrid::new(0.3, 1e-3).unwrap();
    let psi0 = Ket::product(&vec![random::ket(&mut random::rng(1), 2); 3]).unwrap();
    let noise = sample_wiener(&grid, 3, SeedSpec::new(15, 0)).unwrap();
    let rec = simulate(&psi0, &m, &noise, Variant::Diffusive, true).unwrap();
    assert!(rec.particles.iter().flatten().all(|p| p.u.abs() <= 0.3));
}
