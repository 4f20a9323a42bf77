//! The limiting one-particle dynamics, where the pair interaction is replaced
//! by the Hartree operator `A^η̄` of the deterministic curve `η_t = E γ_t`,
//! and the solvers that produce that curve.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{counting_density_step, counting_pure_step, density_step, nonlinear_step, OneParticleModel, QuadraticSign, Scheme};
use crate::hilbert::ops::contract_matrix;
use crate::hilbert::{anticommutator, commutator, BoundedOp, CMatrix, DensityOp, Ket, PairKernel, C64, HERMITIAN_TOL, I};
use crate::manybody::{ControlPolicy, ManyBodyModel, Variant};
use crate::noise::{sample_unit_poisson, sample_wiener, NoiseBundle, SeedSpec, TimeGrid};
use crate::reduce::{ordered_map, tree_map_reduce};

/// Salt separating the Picard ensemble's noise from experiment noise drawn
/// with the same master seed.
const PICARD_SALT: u64 = 0x7069_6361_7264_0000;

/// Everything the limiting equation needs: the one-particle model, the
/// controlled part `Ĥ`, the pair kernel and the control policy.
#[derive(Clone, Debug)]
pub struct LimitModel {
    one: OneParticleModel,
    hhat: BoundedOp,
    a: PairKernel,
    control: ControlPolicy,
}

impl LimitModel {
    pub fn new(one: OneParticleModel, hhat: BoundedOp, a: PairKernel, control: ControlPolicy) -> Result<Self> {
        let d = one.dim();
        if hhat.dim() != d || a.one_particle_dim() != d {
            return Err(Error::Shape(format!(
                "Hhat (dim {}) and kernel (d = {}) must match the model dim {d}",
                hhat.dim(),
                a.one_particle_dim()
            )));
        }
        if !hhat.is_hermitian(HERMITIAN_TOL) {
            return Err(Error::Invariant("Hhat must be Hermitian".into()));
        }
        Ok(LimitModel { one, hhat, a, control })
    }

    pub fn from_many_body(m: &ManyBodyModel) -> Self {
        LimitModel {
            one: m.one_particle().clone(),
            hhat: m.hhat().clone(),
            a: m.kernel().clone(),
            control: m.control().clone(),
        }
    }

    pub fn one_particle(&self) -> &OneParticleModel {
        &self.one
    }

    pub fn hhat(&self) -> &BoundedOp {
        &self.hhat
    }

    pub fn kernel(&self) -> &PairKernel {
        &self.a
    }

    pub fn control(&self) -> &ControlPolicy {
        &self.control
    }

    pub fn dim(&self) -> usize {
        self.one.dim()
    }

    /// `H + u Ĥ + A^η̄`.
    pub fn effective_hamiltonian(&self, eta: &CMatrix, u: f64) -> CMatrix {
        let mut h = self.one.hamiltonian().matrix() + self.hhat.matrix().scale(u);
        if !self.a.is_zero() {
            h += contract_matrix(&self.a, eta);
        }
        h
    }

    fn check(&self, state_dim: usize, eta: &DensityOp) -> Result<()> {
        let d = self.dim();
        if state_dim != d || eta.dim() != d {
            return Err(Error::Shape(format!(
                "state dim {state_dim} and curve dim {} must equal the model dim {d}",
                eta.dim()
            )));
        }
        Ok(())
    }
}

/// One step of the limiting pure-state equation for diffusive observation.
pub fn step_limit_diffusive(psi: &Ket, model: &LimitModel, eta: &DensityOp, u: f64, db: &[f64], dt: f64) -> Result<Ket> {
    step_limit_diffusive_signed(psi, model, eta, u, db, dt, QuadraticSign::Dissipative)
}

/// As [`step_limit_diffusive`] with an explicit sign on the quadratic drift.
pub fn step_limit_diffusive_signed(
    psi: &Ket,
    model: &LimitModel,
    eta: &DensityOp,
    u: f64,
    db: &[f64],
    dt: f64,
    sign: QuadraticSign,
) -> Result<Ket> {
    model.check(psi.dim(), eta)?;
    if db.len() != model.one.channel_count() {
        return Err(Error::Shape(format!("{} noise values for {} channels", db.len(), model.one.channel_count())));
    }
    let h = model.effective_hamiltonian(eta.matrix(), u);
    nonlinear_step(&h, model.one.channels(), psi, db, dt, sign, Scheme::EulerMaruyama)
}

/// Density-matrix form of the limiting diffusive equation.
pub fn step_limit_density(gamma: &DensityOp, model: &LimitModel, eta: &DensityOp, u: f64, db: &[f64], dt: f64) -> Result<DensityOp> {
    model.check(gamma.dim(), eta)?;
    if db.len() != model.one.channel_count() {
        return Err(Error::Shape(format!("{} noise values for {} channels", db.len(), model.one.channel_count())));
    }
    let h = model.effective_hamiltonian(eta.matrix(), u);
    density_step(&h, model.one.channels(), gamma.matrix(), db, dt, Scheme::EulerMaruyama)
}

/// Limiting counting equation with unitary couplings.
pub fn step_limit_counting_unitary(psi: &Ket, model: &LimitModel, eta: &DensityOp, u: f64, jumps: &[u32], dt: f64) -> Result<Ket> {
    model.check(psi.dim(), eta)?;
    model.one.require_unitary()?;
    if jumps.len() != model.one.channel_count() {
        return Err(Error::Shape(format!("{} jump counts for {} channels", jumps.len(), model.one.channel_count())));
    }
    let h = model.effective_hamiltonian(eta.matrix(), u);
    counting_pure_step(&h, model.one.channels(), psi, jumps, dt)
}

/// Density form of the limiting counting equation.
pub fn step_limit_counting_density(
    gamma: &DensityOp,
    model: &LimitModel,
    eta: &DensityOp,
    u: f64,
    jumps: &[u32],
    dt: f64,
) -> Result<DensityOp> {
    model.check(gamma.dim(), eta)?;
    let h = model.effective_hamiltonian(eta.matrix(), u);
    counting_density_step(&h, model.one.channels(), gamma.matrix(), jumps, dt)
}

/// The deterministic curve `η_t` on a time grid, one density per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldCurve {
    grid: TimeGrid,
    etas: Vec<DensityOp>,
}

impl MeanFieldCurve {
    pub fn new(grid: TimeGrid, etas: Vec<DensityOp>) -> Result<Self> {
        if etas.len() != grid.steps() + 1 {
            return Err(Error::Shape(format!("{} curve points for {} steps", etas.len(), grid.steps())));
        }
        let d = etas[0].dim();
        if etas.iter().any(|e| e.dim() != d) {
            return Err(Error::Shape("curve points of mixed dimension".into()));
        }
        Ok(MeanFieldCurve { grid, etas })
    }

    pub fn constant(grid: TimeGrid, eta: DensityOp) -> Self {
        MeanFieldCurve {
            grid,
            etas: vec![eta; grid.steps() + 1],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.etas[0].dim()
    }

    pub fn at(&self, step: usize) -> &DensityOp {
        &self.etas[step]
    }

    pub fn points(&self) -> &[DensityOp] {
        &self.etas
    }

    /// `sup_t ‖η_t − η'_t‖_HS`.
    pub fn sup_hs_distance(&self, other: &MeanFieldCurve) -> Result<f64> {
        if self.etas.len() != other.etas.len() || self.dim() != other.dim() {
            return Err(Error::Shape("curves live on different grids".into()));
        }
        Ok(self
            .etas
            .iter()
            .zip(&other.etas)
            .map(|(a, b)| crate::hilbert::hs_norm(&(a.matrix() - b.matrix())))
            .fold(0.0, f64::max))
    }

    pub fn max_trace_drift(&self) -> f64 {
        self.etas.iter().map(|e| (e.trace() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// CSV: `t`, then `re_rc, im_rc` for every entry in row-major order.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("t");
        for r in 0..d {
            for c in 0..d {
                let _ = write!(out, ",re_{r}{c},im_{r}{c}");
            }
        }
        out.push('\n');
        for (n, e) in self.etas.iter().enumerate() {
            let _ = write!(out, "{}", self.grid.time(n));
            let m = e.matrix();
            for r in 0..d {
                for c in 0..d {
                    let _ = write!(out, ",{},{}", m[(r, c)].re, m[(r, c)].im);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty curve file".into()))?;
        let cols = header.split(',').count();
        if cols < 3 || (cols - 1) % 2 != 0 {
            return Err(Error::Format(format!("curve header has {cols} columns")));
        }
        let entries = (cols - 1) / 2;
        let d = (entries as f64).sqrt().round() as usize;
        if d * d != entries {
            return Err(Error::Format(format!("{entries} entries do not form a square matrix")));
        }
        let mut times = Vec::new();
        let mut etas = Vec::new();
        for (k, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", k + 1)))?;
            if vals.len() != cols {
                return Err(Error::Format(format!("row {} has {} columns, expected {cols}", k + 1, vals.len())));
            }
            times.push(vals[0]);
            let m = CMatrix::from_fn(d, d, |r, c| {
                let i = 1 + 2 * (r * d + c);
                C64::new(vals[i], vals[i + 1])
            });
            etas.push(DensityOp::new(m)?);
        }
        if times.len() < 2 {
            return Err(Error::Format("a curve needs at least two points".into()));
        }
        let dt = times[1] - times[0];
        let t_end = *times.last().unwrap();
        let steps = ((t_end / dt).round()) as usize;
        let grid = TimeGrid::new(steps as f64 * dt, dt)?;
        MeanFieldCurve::new(grid, etas)
    }
}

/// Right-hand side of the closed curve equation,
/// `−i[H + u₀Ĥ + A^η̄, η] + Σ (LηL* − ½{L*L, η})`.
fn closed_rhs(model: &LimitModel, eta: &CMatrix, u0: f64) -> CMatrix {
    let h = model.effective_hamiltonian(eta, u0);
    let mut rhs = commutator(&h, eta) * (-I);
    for c in model.one.channels() {
        rhs += c.matrix() * eta * c.adjoint() - anticommutator(c.adjoint_times_op(), eta).scale(0.5);
    }
    rhs
}

/// Deterministic curve for constant control by explicit Euler stepping.
///
/// With `u` independent of the state the expectation of the limiting
/// density equation closes on itself, and Euler on the closed equation is
/// exactly the mean of the Euler–Maruyama density scheme at its fixed point.
pub fn solve_eta_closed(model: &LimitModel, u0: f64, grid: &TimeGrid, eta0: &DensityOp) -> Result<MeanFieldCurve> {
    if eta0.dim() != model.dim() {
        return Err(Error::Shape(format!("initial curve point has dim {}, model dim is {}", eta0.dim(), model.dim())));
    }
    let mut etas = Vec::with_capacity(grid.steps() + 1);
    let mut eta = eta0.matrix().clone();
    etas.push(eta0.clone());
    for n in 0..grid.steps() {
        let next = &eta + closed_rhs(model, &eta, u0).scale(grid.dt());
        if next.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::BlowUp { step: Some(n) });
        }
        eta = (&next + next.adjoint()).scale(0.5);
        etas.push(DensityOp::from_matrix_unchecked(eta.clone()));
    }
    MeanFieldCurve::new(*grid, etas)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub ensemble: usize,
    pub tolerance: f64,
    /// Window length; the fixed point is solved window by window.
    pub window: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            ensemble: 1000,
            tolerance: 1e-3,
            window: 0.25,
            max_iterations: 50,
            seed: 0,
            variant: Variant::Diffusive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardWindow {
    pub t_start: f64,
    pub t_end: f64,
    /// `sup_t ‖η^(m+1) − η^(m)‖_HS` per iteration.
    pub distances: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub windows: Vec<PicardWindow>,
    pub tolerance: f64,
    pub ensemble: usize,
    /// `sup_t` of the 95% Monte Carlo half-width of the final ensemble mean,
    /// measured in Hilbert–Schmidt norm.
    pub monte_carlo_ci: f64,
}

impl PicardReport {
    pub fn total_iterations(&self) -> usize {
        self.windows.iter().map(|w| w.distances.len()).sum()
    }

    pub fn converged(&self) -> bool {
        self.windows.iter().all(|w| w.converged)
    }

    /// Whether every window's distances decrease strictly.
    pub fn monotone(&self) -> bool {
        self.windows
            .iter()
            .all(|w| w.distances.windows(2).all(|p| p[1] < p[0]))
    }
}

/// Ensemble-mean accumulator: per-step sums of `γ` and of `‖γ‖²_HS`.
struct Moments {
    sum: Vec<CMatrix>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn of(states: &[CMatrix]) -> Self {
        Moments {
            sum: states.to_vec(),
            sum_sq: states.iter().map(|g| g.iter().map(|z| z.norm_sqr()).sum()).collect(),
        }
    }

    fn merge(mut self, other: Moments) -> Self {
        for (a, b) in self.sum.iter_mut().zip(other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(other.sum_sq) {
            *a += b;
        }
        self
    }
}

/// One ensemble trajectory over steps `[start, end]` with a frozen curve.
#[allow(clippy::too_many_arguments)]
fn window_trajectory(
    model: &LimitModel,
    variant: Variant,
    curve: &[DensityOp],
    noise: &NoiseBundle,
    gamma0: &CMatrix,
    start: usize,
    end: usize,
    grid: &TimeGrid,
) -> Result<Vec<CMatrix>> {
    let mut out = Vec::with_capacity(end - start + 1);
    let mut g = DensityOp::from_matrix_unchecked(gamma0.clone());
    out.push(gamma0.clone());
    for n in start..end {
        let eta = &curve[n - start];
        let u = model.control.evaluate(grid.time(n), g.matrix());
        g = match variant {
            Variant::Diffusive => step_limit_density(&g, model, eta, u, noise.dw(n), grid.dt()),
            Variant::Counting => step_limit_counting_density(&g, model, eta, u, noise.jumps(n), grid.dt()),
        }
        .map_err(|e| e.at_step(n))?;
        out.push(g.matrix().clone());
    }
    Ok(out)
}

/// Fixed-point iteration for `η_t = E γ_t`: every iterate is the ensemble
/// mean of `M` limiting density trajectories driven by the previous iterate,
/// with the same noise in every iteration. Long horizons are split into
/// windows whose terminal trajectory states seed the next window.
pub fn solve_eta_picard(
    model: &LimitModel,
    grid: &TimeGrid,
    gamma0: &DensityOp,
    opts: &PicardOptions,
) -> Result<(MeanFieldCurve, PicardReport)> {
    if opts.ensemble < 2 {
        return Err(Error::Invariant("Picard ensemble needs at least two trajectories".into()));
    }
    if !(opts.tolerance > 0.0) || !(opts.window > 0.0) || opts.max_iterations == 0 {
        return Err(Error::Invariant("Picard tolerance, window and iteration cap must be positive".into()));
    }
    if gamma0.dim() != model.dim() {
        return Err(Error::Shape("initial state dimension does not match the model".into()));
    }
    if opts.variant == Variant::Counting {
        model.one.require_unitary()?;
    }
    let channels = model.one.channel_count();
    let noises: Vec<NoiseBundle> = ordered_map(opts.ensemble, |i| {
        let seed = SeedSpec::new(opts.seed ^ PICARD_SALT, i as u64);
        match opts.variant {
            Variant::Diffusive => sample_wiener(grid, channels, seed),
            Variant::Counting => sample_unit_poisson(grid, channels, seed),
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let window_steps = ((opts.window / grid.dt()).round() as usize).max(1);
    let m = opts.ensemble as f64;
    let mut states: Vec<CMatrix> = vec![gamma0.matrix().clone(); opts.ensemble];
    let mut etas: Vec<DensityOp> = vec![gamma0.clone()];
    let mut windows = Vec::new();
    let mut ci = 0.0f64;
    let mut start = 0;
    while start < grid.steps() {
        let end = (start + window_steps).min(grid.steps());
        let eta_start = etas.last().unwrap().clone();
        let mut curve = vec![eta_start.clone(); end - start + 1];
        let mut distances = Vec::new();
        let mut converged = false;
        let mut terminal = states.clone();
        let mut last_ci = 0.0;
        for _ in 0..opts.max_iterations {
            let trajectories: Vec<Vec<CMatrix>> = ordered_map(opts.ensemble, |i| {
                window_trajectory(model, opts.variant, &curve, &noises[i], &states[i], start, end, grid)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let moments = tree_map_reduce(opts.ensemble, |i| Moments::of(&trajectories[i]), Moments::merge)
                .expect("non-empty ensemble");
            let next: Vec<DensityOp> = moments
                .sum
                .iter()
                .map(|s| DensityOp::from_matrix_unchecked(s.unscale(m)).hermitize())
                .collect();
            last_ci = moments
                .sum
                .iter()
                .zip(&moments.sum_sq)
                .map(|(s, &sq)| {
                    let mean_sq: f64 = s.iter().map(|z| z.norm_sqr()).sum::<f64>() / (m * m);
                    let var = (sq / m - mean_sq).max(0.0) * m / (m - 1.0);
                    1.96 * (var / m).sqrt()
                })
                .fold(0.0, f64::max);
            let dist = curve
                .iter()
                .zip(&next)
                .map(|(a, b)| crate::hilbert::hs_norm(&(a.matrix() - b.matrix())))
                .fold(0.0, f64::max);
            terminal = trajectories.into_iter().map(|mut t| t.pop().unwrap()).collect();
            curve = next;
            // without interaction the map ignores its input: one pass is exact
            let d = if model.a.is_zero() { 0.0 } else { dist };
            distances.push(d);
            if d <= opts.tolerance {
                converged = true;
                break;
            }
        }
        ci = ci.max(last_ci);
        windows.push(PicardWindow {
            t_start: grid.time(start),
            t_end: grid.time(end),
            distances,
            converged,
        });
        states = terminal;
        etas.extend(curve.into_iter().skip(1));
        start = end;
    }
    let report = PicardReport {
        windows,
        tolerance: opts.tolerance,
        ensemble: opts.ensemble,
        monte_carlo_ci: ci,
    };
    Ok((MeanFieldCurve::new(*grid, etas)?, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMethod {
    #[default]
    Closed,
    Picard,
}

/// Produces the frozen curve for a convergence experiment. The closed
/// solver needs constant control; a Picard run that fails to converge is an
/// error carrying its report.
pub fn resolve_eta(
    model: &LimitModel,
    grid: &TimeGrid,
    gamma0: &DensityOp,
    method: EtaMethod,
    opts: &PicardOptions,
) -> Result<(MeanFieldCurve, Option<PicardReport>)> {
    match method {
        EtaMethod::Closed => {
            let ControlPolicy::Constant { u0 } = model.control else {
                return Err(Error::Contract("the closed curve solver requires constant control".into()));
            };
            Ok((solve_eta_closed(model, u0, grid, gamma0)?, None))
        }
        EtaMethod::Picard => {
            let (curve, report) = solve_eta_picard(model, grid, gamma0, opts)?;
            if !report.converged() {
                return Err(Error::EtaNotConverged(Box::new(report)));
            }
            Ok((curve, Some(report)))
        }
    }
}

/// Le Roy function of index ½, `R(z) = Σ_k z^k / √(k!)`.
pub fn leroy(z: f64) -> Result<f64> {
    if !(z >= 0.0) || !z.is_finite() {
        return Err(Error::Range(format!("Le Roy argument must be finite and ≥ 0, got {z}")));
    }
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut k = 0usize;
    loop {
        let ratio = z / ((k + 1) as f64).sqrt();
        term *= ratio;
        sum += term;
        k += 1;
        if !sum.is_finite() {
            return Err(Error::Range(format!("R({z}) overflows f64")));
        }
        // ratios decrease in k, so once below one the tail is geometric
        let next_ratio = z / ((k + 1) as f64).sqrt();
        if next_ratio < 1.0 && term * next_ratio / (1.0 - next_ratio) <= 1e-16 * sum {
            return Ok(sum);
        }
        if term == 0.0 {
            return Ok(sum);
        }
    }
}

/// `M(t) = R(√(2(κ₃² + κ₁²)) · max(√t, t))`.
pub fn growth_bound_m(t: f64, kappa1: f64, kappa3: f64) -> Result<f64> {
    if !(t >= 0.0 && kappa1 >= 0.0 && kappa3 >= 0.0) {
        return Err(Error::Range(format!("growth bound inputs must be ≥ 0, got t={t}, κ₁={kappa1}, κ₃={kappa3}")));
    }
    leroy((2.0 * (kappa3 * kappa3 + kappa1 * kappa1)).sqrt() * t.sqrt().max(t))
}
