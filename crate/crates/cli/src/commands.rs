//! `simulate`, `convergence` and `eta`.

use qmf_core::diagnostics::{convergence_experiment, reports_to_csv, summarize, ConvergenceSummary, ExperimentSpec};
use qmf_core::filtering::{
    simulate_counting_pure_unitary, simulate_counting_thinned, simulate_density, simulate_linear, simulate_nonlinear,
    RunOptions,
};
use qmf_core::hilbert::CMatrix;
use qmf_core::manybody::{self, ControlPolicy, ManyBodyModel, Variant};
use qmf_core::meanfield::{resolve_eta, EtaMethod, LimitModel, MeanFieldCurve, PicardReport};
use qmf_core::noise::{sample_unit_poisson, sample_wiener, SeedSpec};
use qmf_core::reduce::ordered_map;

use crate::config::{Built, ConfigError, FilterKind, Format, RunConfig};
use crate::manifest::Artifacts;
use crate::{CliError, Outcome};

/// Observables written to trajectory CSVs: `H`, `Ĥ` and every coupling.
fn observables(built: &Built) -> Vec<(String, CMatrix)> {
    let mut obs = vec![
        ("h".to_string(), built.one.hamiltonian().matrix().clone()),
        ("hhat".to_string(), built.hhat.matrix().clone()),
    ];
    for (l, c) in built.one.channels().iter().enumerate() {
        obs.push((format!("l{l}"), c.matrix().clone()));
    }
    obs
}

fn one_particle_files(cfg: &RunConfig, built: &Built, r: usize) -> Result<(String, Vec<u8>), CliError> {
    let seed = SeedSpec::new(cfg.sim.seed, r as u64);
    let channels = built.one.channel_count();
    let opts = RunOptions {
        renormalize: cfg.sim.renormalize,
        ..RunOptions::default()
    }
    .with_scheme(cfg.sim.scheme);
    let obs = observables(built);
    let mut bin = Vec::new();
    let csv = match (cfg.sim.variant, cfg.sim.filter) {
        (Variant::Diffusive, FilterKind::Ket) => {
            let rec = simulate_nonlinear(&built.psi0, &built.one, &sample_wiener(&built.grid, channels, seed)?, opts)?;
            rec.write_states(&mut bin)?;
            rec.to_csv(&obs)
        }
        (Variant::Diffusive, FilterKind::Linear) => {
            let noise = sample_wiener(&built.grid, channels, seed)?;
            let rec = simulate_linear(&built.psi0, &built.one, &noise, cfg.sim.scheme)?;
            rec.write_states(&mut bin)?;
            rec.to_csv(&obs)
        }
        (Variant::Diffusive, FilterKind::Density) => {
            let noise = sample_wiener(&built.grid, channels, seed)?;
            let rec = simulate_density(&built.gamma0(), &built.one, &noise, opts)?;
            rec.write_states(&mut bin)?;
            rec.to_csv(&obs)
        }
        (Variant::Counting, FilterKind::Ket) => {
            let noise = sample_unit_poisson(&built.grid, channels, seed)?;
            let rec = simulate_counting_pure_unitary(&built.psi0, &built.one, &noise, opts)?;
            rec.write_states(&mut bin)?;
            rec.to_csv(&obs)
        }
        (Variant::Counting, FilterKind::Density) => {
            let rec = simulate_counting_thinned(&built.gamma0(), &built.one, &built.grid, seed, opts)?;
            rec.write_states(&mut bin)?;
            rec.to_csv(&obs)
        }
        (Variant::Counting, FilterKind::Linear) => unreachable!("rejected during validation"),
    };
    Ok((csv, bin))
}

/// One-particle trajectories, then N-particle trajectories for every entry
/// of `sim.particles`.
pub fn run_simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let built = cfg.build()?;
    if cfg.sim.variant == Variant::Counting {
        match cfg.sim.filter {
            FilterKind::Linear => {
                return Err(ConfigError::new("sim.filter", "the linear filter exists for diffusive observation only").into())
            }
            FilterKind::Ket => cfg.require_unitary_couplings(&built)?,
            FilterKind::Density => {}
        }
    }
    if cfg.sim.variant == Variant::Counting && !cfg.sim.particles.is_empty() {
        cfg.require_unitary_couplings(&built)?;
    }
    let mut out = Artifacts::create(&cfg.output.directory)?;
    let binary = cfg.output.formats.contains(&Format::Binary);
    let csv = cfg.output.formats.contains(&Format::Csv);
    let traj: Vec<(String, Vec<u8>)> = ordered_map(cfg.sim.trajectories, |r| one_particle_files(cfg, &built, r))
        .into_iter()
        .collect::<Result<_, _>>()?;
    for (r, (text, bin)) in traj.iter().enumerate() {
        if csv {
            out.write(&format!("trajectory_{r:04}.csv"), text.as_bytes())?;
        }
        if binary {
            out.write(&format!("trajectory_{r:04}.bin"), bin)?;
        }
    }
    let obs = observables(&built);
    for &n in &cfg.sim.particles {
        let model = ManyBodyModel::new(built.one.clone(), built.hhat.clone(), built.a.clone(), n, built.control.clone())?;
        let psi0 = qmf_core::Ket::product(&vec![built.psi0.clone(); n])?;
        let texts: Vec<String> = ordered_map(cfg.sim.trajectories, |r| -> Result<String, CliError> {
            let seed = SeedSpec::new(cfg.sim.seed, ((n as u64) << 32) | r as u64);
            let noise = match cfg.sim.variant {
                Variant::Diffusive => sample_wiener(&built.grid, model.noise_channels(), seed)?,
                Variant::Counting => sample_unit_poisson(&built.grid, model.noise_channels(), seed)?,
            };
            let rec = manybody::simulate(&psi0, &model, &noise, cfg.sim.variant, cfg.sim.renormalize)?;
            Ok(rec.to_csv(&obs))
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        if csv {
            for (r, text) in texts.iter().enumerate() {
                out.write(&format!("manybody_n{n}_{r:04}.csv"), text.as_bytes())?;
            }
        }
    }
    out.finish("simulate", &cfg.canonical_json(), cfg.sim.seed)?;
    Ok(Outcome::Pass)
}

fn limit_model(built: &Built) -> Result<LimitModel, CliError> {
    Ok(LimitModel::new(built.one.clone(), built.hhat.clone(), built.a.clone(), built.control.clone())?)
}

/// The frozen curve, or the failing Picard report.
fn solve_eta(cfg: &RunConfig, built: &Built) -> Result<Result<(MeanFieldCurve, Option<PicardReport>), PicardReport>, CliError> {
    if cfg.meanfield.method == EtaMethod::Closed && !matches!(built.control, ControlPolicy::Constant { .. }) {
        return Err(ConfigError::new("meanfield.method", "the closed solver needs constant control; use picard").into());
    }
    if cfg.sim.variant == Variant::Counting && cfg.meanfield.method == EtaMethod::Picard {
        cfg.require_unitary_couplings(built)?;
    }
    let model = limit_model(built)?;
    match resolve_eta(&model, &built.grid, &built.gamma0(), cfg.meanfield.method, &cfg.picard_options()) {
        Ok(v) => Ok(Ok(v)),
        Err(qmf_core::Error::EtaNotConverged(report)) => Ok(Err(*report)),
        Err(e) => Err(e.into()),
    }
}

pub fn run_eta(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let built = cfg.build()?;
    let mut out = Artifacts::create(&cfg.output.directory)?;
    let outcome = match solve_eta(cfg, &built)? {
        Ok((curve, report)) => {
            out.write("eta.csv", curve.to_csv().as_bytes())?;
            if let Some(r) = report {
                out.write_json("picard.json", &r)?;
            }
            println!("eta: {} points, max trace drift {:.2e}", curve.points().len(), curve.max_trace_drift());
            Outcome::Pass
        }
        Err(report) => {
            out.write_json("picard.json", &report)?;
            eprintln!("Picard iteration did not converge after {} iterations", report.total_iterations());
            Outcome::Fail
        }
    };
    out.finish("eta", &cfg.canonical_json(), cfg.meanfield.seed)?;
    Ok(outcome)
}

/// Mean-field solve, paired simulations, bound check. `bound_scale` below
/// one shrinks the bound for negative controls.
pub fn run_convergence(cfg: &RunConfig, bound_scale: f64) -> Result<(Outcome, Option<ConvergenceSummary>), CliError> {
    let built = cfg.build()?;
    if cfg.sim.variant == Variant::Counting {
        cfg.require_unitary_couplings(&built)?;
    }
    if cfg.sim.particles.is_empty() {
        return Err(ConfigError::new("sim.particles", "convergence needs at least one particle count").into());
    }
    if cfg.sim.trajectories < 2 {
        return Err(ConfigError::new("sim.trajectories", "a confidence interval needs at least two trajectories").into());
    }
    let mut out = Artifacts::create(&cfg.output.directory)?;
    let (eta, report) = match solve_eta(cfg, &built)? {
        Ok(v) => v,
        Err(report) => {
            out.write_json("picard.json", &report)?;
            out.finish("convergence", &cfg.canonical_json(), cfg.sim.seed)?;
            eprintln!("Picard iteration did not converge; no convergence experiment was run");
            return Ok((Outcome::Fail, None));
        }
    };
    out.write("eta.csv", eta.to_csv().as_bytes())?;
    if let Some(r) = &report {
        out.write_json("picard.json", r)?;
    }
    let spec = ExperimentSpec {
        one: built.one.clone(),
        hhat: built.hhat.clone(),
        a: built.a.clone(),
        control: built.control.clone(),
        variant: cfg.sim.variant,
        n_list: cfg.sim.particles.clone(),
        trajectories: cfg.sim.trajectories,
        grid: built.grid,
        seed: cfg.sim.seed,
        psi0: built.psi0.clone(),
        renormalize: cfg.sim.renormalize,
        bound_scale,
    };
    let reports = convergence_experiment(&spec, &eta)?;
    let summary = summarize(&reports).expect("at least one particle count");
    out.write("convergence.csv", reports_to_csv(&reports).as_bytes())?;
    out.write_json("summary.json", &summary)?;
    out.finish("convergence", &cfg.canonical_json(), cfg.sim.seed)?;
    let outcome = if summary.all_pass { Outcome::Pass } else { Outcome::Fail };
    Ok((outcome, Some(summary)))
}
