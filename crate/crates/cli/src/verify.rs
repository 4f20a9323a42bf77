//! Randomized check suites behind `qmf verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use qmf_core::diagnostics::{
    counting_dt_cancellation_check, counting_dt_residual, knowles_pickl_check, lemma_a1_check, lemma_lhs_general,
    residual_scale, LemmaVariant,
};
use qmf_core::filtering::{
    simulate_density, simulate_linear, simulate_nonlinear, trace_distance_to_ket, RunOptions, Scheme,
};
use qmf_core::hilbert::{random, trace_norm, CMatrix, DensityOp, Ket, TensorLayout};
use qmf_core::meanfield::{growth_bound_m, leroy};
use qmf_core::noise::{sample_wiener, SeedSpec};
use qmf_core::reduce::tree_map_reduce;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    LemmaA,
    Cancellation,
    Kp,
    Leroy,
    ItoConsistency,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::LemmaA => "lemma-a",
            Suite::Cancellation => "cancellation",
            Suite::Kp => "kp",
            Suite::Leroy => "leroy",
            Suite::ItoConsistency => "ito-consistency",
        }
    }

    fn default_samples(self) -> usize {
        match self {
            Suite::LemmaA => 100_000,
            Suite::Cancellation | Suite::Kp => 10_000,
            Suite::Leroy => 5,
            Suite::ItoConsistency => 400,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub seed: u64,
    pub samples: usize,
    pub pass: bool,
    pub details: Value,
}

fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64)
}

/// A projector and a unit-trace `Γ`, often very close to it.
fn projector_and_density(rng: &mut ChaCha8Rng, d: usize) -> (DensityOp, DensityOp) {
    let psi = random::ket(rng, d);
    let gamma = psi.projector().expect("random kets are normalized");
    let rank = rng.random_range(1..=d);
    let eps = 10f64.powf(rng.random_range(-8.0..0.0));
    let big = match rng.random_range(0..3) {
        0 => random::density(rng, d, rank),
        1 => {
            let rho = random::density(rng, d, rank);
            DensityOp::from_matrix_unchecked(gamma.matrix().scale(1.0 - eps) + rho.matrix().scale(eps))
        }
        _ => {
            let rho = random::density(rng, d, rank);
            let perp = CMatrix::identity(d, d) - gamma.matrix();
            let off = &perp * rho.matrix() * &perp;
            let t = off.trace().re;
            DensityOp::from_matrix_unchecked(gamma.matrix().scale(1.0 - eps) + off.scale(eps / t))
        }
    };
    (gamma, big)
}

fn lemma_a(seed: u64, samples: usize) -> (bool, Value) {
    let outcomes: Vec<(bool, bool, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let d = rng.random_range(2..=16);
            let (gamma, big) = projector_and_density(&mut rng, d);
            let cap = rng.random_range(0.1..3.0);
            let h = random::hermitian(&mut rng, d, cap);
            let l = random::bounded(&mut rng, d, cap);
            let skew = random::anti_hermitian(&mut rng, d, cap);
            let herm = lemma_a1_check(&gamma, &big, &h, LemmaVariant::Hermitian).expect("valid triple");
            let gen = lemma_a1_check(&gamma, &big, &l, LemmaVariant::General).expect("valid triple");
            let skew_ratio = lemma_lhs_general(gamma.matrix(), big.matrix(), skew.matrix()).norm() / residual_scale(&skew, &big);
            (herm.pass, gen.pass, skew_ratio)
        })
        .collect();
    let herm_fail = outcomes.iter().filter(|o| !o.0).count();
    let gen_fail = outcomes.iter().filter(|o| !o.1).count();
    let skew = outcomes.iter().map(|o| o.2).fold(0.0, f64::max);
    let pass = herm_fail == 0 && gen_fail == 0 && skew <= 1e-10;
    (
        pass,
        json!({ "hermitian_violations": herm_fail, "general_violations": gen_fail, "anti_hermitian_max_ratio": skew }),
    )
}

fn cancellation(seed: u64, samples: usize) -> (bool, Value) {
    let results: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let d = rng.random_range(2..=3);
            let n = rng.random_range(2..=3);
            let layout = TensorLayout::new(d, n).expect("small layout");
            let j = rng.random_range(0..n);
            let rank = rng.random_range(1..=4);
            let big = random::density(&mut rng, layout.total(), rank);
            let gamma = random::projector(&mut rng, d);
            let u = random::unitary(&mut rng, d);
            let good = counting_dt_cancellation_check(&big, &gamma, &u, &layout, j).expect("unitary coupling")
                / residual_scale(&u, &big);
            let cap = rng.random_range(0.5..2.0);
            let l = random::bounded(&mut rng, d, cap);
            let bad = counting_dt_residual(&big, &gamma, &l, &layout, j).expect("shapes agree") / residual_scale(&l, &big);
            (good, bad)
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let detected = results.iter().filter(|r| r.1 > 1e-3).count() as f64 / samples.max(1) as f64;
    (
        worst <= 1e-10 && detected >= 0.99,
        json!({ "unitary_max_ratio": worst, "non_unitary_detected_fraction": detected }),
    )
}

fn kp(seed: u64, samples: usize) -> (bool, Value) {
    let mut per_dim = Vec::new();
    let mut total = 0;
    for d in 2..=8usize {
        let fails = (0..samples)
            .into_par_iter()
            .filter(|&i| {
                let mut rng = sample_rng(seed.wrapping_add(d as u64), i);
                let (gamma, big) = projector_and_density(&mut rng, d);
                !knowles_pickl_check(&big, &gamma).expect("valid pair").pass
            })
            .count();
        total += fails;
        per_dim.push(json!({ "d": d, "violations": fails }));
    }
    (total == 0, json!({ "per_dimension": per_dim }))
}

fn brute_leroy(z: f64) -> f64 {
    if z == 0.0 {
        return 1.0;
    }
    let mut terms: Vec<f64> = (0..400usize)
        .map(|k| {
            let lg: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
            (k as f64 * z.ln() - 0.5 * lg).exp()
        })
        .collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

fn leroy_suite() -> (bool, Value) {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for z in [0.0, 0.5, 1.0, 2.0, 5.0] {
        let exact = brute_leroy(z);
        let got = leroy(z).expect("finite argument");
        let rel = (got - exact).abs() / exact;
        worst = worst.max(rel);
        rows.push(json!({ "z": z, "value": got, "relative_error": rel }));
    }
    let unit = growth_bound_m(0.0, 1.0, 2.0).expect("valid inputs") == 1.0;
    (worst <= 1e-12 && unit, json!({ "points": rows, "max_relative_error": worst, "growth_bound_at_zero_is_one": unit }))
}

#[derive(Clone, Copy, Default, Serialize)]
struct Errors {
    norm_drift: f64,
    trace_drift: f64,
    psi_vs_gamma: f64,
    linear_vs_nonlinear: f64,
}

impl Errors {
    fn add(self, o: Errors) -> Errors {
        Errors {
            norm_drift: self.norm_drift + o.norm_drift,
            trace_drift: self.trace_drift + o.trace_drift,
            psi_vs_gamma: self.psi_vs_gamma + o.psi_vs_gamma,
            linear_vs_nonlinear: self.linear_vs_nonlinear + o.linear_vs_nonlinear,
        }
    }

    fn scale(self, s: f64) -> Errors {
        Errors {
            norm_drift: self.norm_drift * s,
            trace_drift: self.trace_drift * s,
            psi_vs_gamma: self.psi_vs_gamma * s,
            linear_vs_nonlinear: self.linear_vs_nonlinear * s,
        }
    }
}

/// Pathwise errors of the Milstein filters at `dt` and `dt/2` on shared Brownian paths.
fn ito_consistency(cfg: &RunConfig, seed: u64, paths: usize) -> Result<(bool, Value), CliError> {
    let built = cfg.build()?;
    let model = &built.one;
    let grid = built.grid;
    let phi0 = &built.psi0;
    let gamma0 = built.gamma0();
    let opts = RunOptions::raw().with_scheme(Scheme::Milstein);
    let one = |noise: &qmf_core::NoiseBundle| -> qmf_core::Result<Errors> {
        let nl = simulate_nonlinear(phi0, model, noise, opts)?;
        let dens = simulate_density(&gamma0, model, noise, opts)?;
        let lin = simulate_linear(phi0, model, noise, Scheme::Milstein)?;
        let phi_t = nl.last().normalized()?;
        let lin_t: Ket = lin.last().normalized()?;
        Ok(Errors {
            norm_drift: nl.max_norm_drift(),
            trace_drift: dens.max_trace_drift(),
            psi_vs_gamma: trace_distance_to_ket(dens.last(), &phi_t),
            linear_vs_nonlinear: 0.5 * trace_norm(&(phi_t.outer() - lin_t.outer())),
        })
    };
    let per_path: Vec<qmf_core::Result<(Errors, Errors)>> = qmf_core::reduce::ordered_map(paths, |r| {
        let coarse = sample_wiener(&grid, model.channel_count(), SeedSpec::new(seed, r as u64))?;
        Ok((one(&coarse)?, one(&coarse.refine())?))
    });
    let per_path: Vec<(Errors, Errors)> = per_path.into_iter().collect::<qmf_core::Result<_>>()?;
    let (c, f) = tree_map_reduce(paths, |i| per_path[i], |a, b| (a.0.add(b.0), a.1.add(b.1)))
        .ok_or_else(|| crate::config::ConfigError::new("verify.samples", "must be positive"))?;
    let (c, f) = (c.scale(1.0 / paths as f64), f.scale(1.0 / paths as f64));
    let dt = grid.dt();
    let halves = |a: f64, b: f64| (1.4..=2.6).contains(&(a / b));
    let norm_ok = c.norm_drift <= 10.0 * dt && halves(c.norm_drift, f.norm_drift);
    let trace_ok = c.trace_drift <= 10.0 * dt && (halves(c.trace_drift, f.trace_drift) || c.trace_drift.max(f.trace_drift) <= 1e-12);
    let a_ok = c.psi_vs_gamma <= 0.02 && halves(c.psi_vs_gamma, f.psi_vs_gamma);
    let b_ok = c.linear_vs_nonlinear <= 0.02 && halves(c.linear_vs_nonlinear, f.linear_vs_nonlinear);
    Ok((
        norm_ok && trace_ok && a_ok && b_ok,
        json!({ "dt": dt, "coarse": c, "fine": f, "scheme": "milstein" }),
    ))
}

pub fn run_verify(cfg: &RunConfig, suite: Suite) -> Result<SuiteReport, CliError> {
    let seed = cfg.verify.seed;
    let samples = cfg.verify.samples.unwrap_or(suite.default_samples());
    let (pass, details) = match suite {
        Suite::LemmaA => lemma_a(seed, samples),
        Suite::Cancellation => cancellation(seed, samples),
        Suite::Kp => kp(seed, samples),
        Suite::Leroy => leroy_suite(),
        Suite::ItoConsistency => ito_consistency(cfg, seed, samples)?,
    };
    Ok(SuiteReport {
        suite: suite.name(),
        seed,
        samples,
        pass,
        details,
    })
}
