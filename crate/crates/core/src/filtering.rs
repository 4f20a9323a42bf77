//! One-particle filtering dynamics under continuous observation.
//!
//! Diffusive (homodyne) observation is integrated with explicit
//! Euler–Maruyama in three equivalent forms: the linear equation for the
//! unnormalized state, the nonlinear equation for the normalized state, and
//! the density-matrix equation. Counting observation is integrated in
//! density-matrix form for any coupling, and in pure-state form when every
//! coupling operator is unitary.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{
    anticommutator, commutator, BoundedOp, CMatrix, CVector, DensityOp, Ket, C64, HERMITIAN_TOL,
    I,
};
use crate::noise::{NoiseBundle, SeedSpec, ThinningStream, TimeGrid};

/// Jump weights `tr(L γ L*)` below this are treated as a bookkeeping error.
pub const DEGENERATE_JUMP_TOL: f64 = 1e-12;
/// Negative eigenvalues beyond this are counted as positivity violations.
pub const PSD_FLAG_TOL: f64 = 1e-6;

/// A coupling operator with the derived pieces every stepper needs.
#[derive(Clone, Debug)]
pub struct Channel {
    op: BoundedOp,
    adj: CMatrix,
    adj_op: CMatrix,
    re: CMatrix,
    im: CMatrix,
}

impl Channel {
    pub fn new(op: BoundedOp) -> Self {
        let m = op.matrix();
        let adj = m.adjoint();
        let adj_op = &adj * m;
        let re = (m + &adj).scale(0.5);
        let im = (m - &adj) * (C64::new(0.5, 0.0) / I);
        Channel { op, adj, adj_op, re, im }
    }

    pub fn op(&self) -> &BoundedOp {
        &self.op
    }

    pub fn matrix(&self) -> &CMatrix {
        self.op.matrix()
    }

    pub fn adjoint(&self) -> &CMatrix {
        &self.adj
    }

    /// `L* L`.
    pub fn adjoint_times_op(&self) -> &CMatrix {
        &self.adj_op
    }

    pub fn real_part(&self) -> &CMatrix {
        &self.re
    }

    pub fn imag_part(&self) -> &CMatrix {
        &self.im
    }
}

#[derive(Clone, Debug)]
pub struct OneParticleModel {
    h: BoundedOp,
    channels: Vec<Channel>,
}

impl OneParticleModel {
    pub fn new(h: BoundedOp, couplings: Vec<BoundedOp>) -> Result<Self> {
        if !h.is_hermitian(HERMITIAN_TOL) {
            return Err(Error::Invariant("Hamiltonian must be Hermitian".into()));
        }
        if couplings.is_empty() {
            return Err(Error::Shape("at least one coupling channel is required".into()));
        }
        if let Some(l) = couplings.iter().find(|l| l.dim() != h.dim()) {
            return Err(Error::Shape(format!(
                "coupling of dim {} does not match Hamiltonian dim {}",
                l.dim(),
                h.dim()
            )));
        }
        Ok(OneParticleModel {
            h,
            channels: couplings.into_iter().map(Channel::new).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn hamiltonian(&self) -> &BoundedOp {
        &self.h
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// The same couplings with a different Hamiltonian.
    pub fn with_hamiltonian(&self, h: BoundedOp) -> Result<Self> {
        if h.dim() != self.dim() {
            return Err(Error::Shape("replacement Hamiltonian has the wrong dimension".into()));
        }
        Ok(OneParticleModel {
            h,
            channels: self.channels.clone(),
        })
    }

    pub fn all_unitary(&self, tol: f64) -> bool {
        self.channels.iter().all(|c| c.op.is_unitary(tol))
    }

    pub(crate) fn require_unitary(&self) -> Result<()> {
        for (k, c) in self.channels.iter().enumerate() {
            let defect = c.op.unitarity_defect();
            if defect > HERMITIAN_TOL {
                return Err(Error::Contract(format!(
                    "coupling channel {k} is not unitary (|L*L − I| = {defect:e})"
                )));
            }
        }
        Ok(())
    }

    /// `Σ_l ‖L_l‖²`.
    pub fn coupling_norm_sqr(&self) -> f64 {
        self.channels.iter().map(|c| c.op.norm().powi(2)).sum()
    }
}

/// Anything that can report normalized expectations.
pub trait QuantumState: Clone {
    fn expect(&self, op: &CMatrix) -> C64;
    fn norm(&self) -> f64;
    fn trace(&self) -> f64;
    fn is_finite(&self) -> bool;
}

impl QuantumState for Ket {
    fn expect(&self, op: &CMatrix) -> C64 {
        let v = self.amplitudes();
        v.dotc(&(op * v)) / self.norm_sqr()
    }

    fn norm(&self) -> f64 {
        Ket::norm(self)
    }

    fn trace(&self) -> f64 {
        self.norm_sqr()
    }

    fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl QuantumState for DensityOp {
    fn expect(&self, op: &CMatrix) -> C64 {
        crate::hilbert::trace_of_product(op, self.matrix()) / DensityOp::trace(self)
    }

    /// Hilbert–Schmidt norm.
    fn norm(&self) -> f64 {
        self.purity().sqrt()
    }

    fn trace(&self) -> f64 {
        DensityOp::trace(self)
    }

    fn is_finite(&self) -> bool {
        self.matrix().iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

fn check_channels(model: &OneParticleModel, noise: &[f64]) -> Result<()> {
    if noise.len() != model.channel_count() {
        return Err(Error::Shape(format!(
            "{} noise values for {} channels",
            noise.len(),
            model.channel_count()
        )));
    }
    Ok(())
}

fn check_dim(model: &OneParticleModel, dim: usize) -> Result<()> {
    if dim != model.dim() {
        return Err(Error::Shape(format!("state of dim {dim} for a model of dim {}", model.dim())));
    }
    Ok(())
}

fn finite_ket(v: CVector) -> Result<Ket> {
    Ket::new(v).map_err(|_| Error::BlowUp { step: None })
}

fn finite_density(m: CMatrix) -> Result<DensityOp> {
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::BlowUp { step: None });
    }
    // Euler steps preserve Hermiticity exactly; this only removes rounding.
    Ok(DensityOp::from_matrix_unchecked((&m + m.adjoint()).scale(0.5)))
}

/// Sign of the `(L − ⟨Re L⟩)*(L − ⟨Re L⟩)` drift term. Only the dissipative
/// sign conserves the norm; the other exists for comparison runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuadraticSign {
    #[default]
    Dissipative,
    Flipped,
}

/// Time discretization for the diffusive steppers.
///
/// Euler–Maruyama has strong order ½, so pathwise errors (norm drift, the gap
/// between equivalent formulations) shrink like `√dt`. Milstein adds the
/// symmetric second-order Itô terms and has strong order 1 whenever the
/// channels' noise coefficients commute, in particular for a single channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    Milstein,
}

/// `ΔB_l ΔB_k − δ_lk dt`, row-major over channel pairs.
fn milstein_weights(db: &[f64], dt: f64) -> Vec<f64> {
    let n = db.len();
    let mut w = Vec::with_capacity(n * n);
    for l in 0..n {
        for k in 0..n {
            w.push(db[l] * db[k] - if l == k { dt } else { 0.0 });
        }
    }
    w
}

pub(crate) fn nonlinear_step(
    h: &CMatrix,
    channels: &[Channel],
    phi: &Ket,
    db: &[f64],
    dt: f64,
    sign: QuadraticSign,
    scheme: Scheme,
) -> Result<Ket> {
    let v = phi.amplitudes();
    let nn = phi.norm_sqr();
    if nn == 0.0 {
        return Err(Error::UndefinedExpectation);
    }
    let half = match sign {
        QuadraticSign::Dissipative => -0.5,
        QuadraticSign::Flipped => 0.5,
    };
    let mut drift = (h * v) * (-I);
    let mut noise = CVector::zeros(v.len());
    let mut means = Vec::with_capacity(channels.len());
    let mut coeffs = Vec::with_capacity(channels.len());
    for (c, &b) in channels.iter().zip(db) {
        let lv = c.matrix() * v;
        let m = v.dotc(&(&c.re * v)).re / nn;
        let ladj_v = &c.adj * v;
        // (L − m)*(L − m) v = L*L v − m (L + L*) v + m² v
        let quad = &c.adj_op * v - (&lv + &ladj_v) * C64::new(m, 0.0) + v * C64::new(m * m, 0.0);
        drift += (&c.im * v) * C64::new(0.0, m) + quad * C64::new(half, 0.0);
        let k = lv - v * C64::new(m, 0.0);
        noise += &k * C64::new(b, 0.0);
        means.push(m);
        coeffs.push(k);
    }
    let mut next = v + drift * C64::new(dt, 0.0) + noise;
    if scheme == Scheme::Milstein {
        let w = milstein_weights(db, dt);
        let n = channels.len();
        for (l, c) in channels.iter().enumerate() {
            let re_v = &c.re * v;
            for (k, bk) in coeffs.iter().enumerate() {
                // derivative of (L − m(v)) v in the direction b_k
                let dm = 2.0 * (bk.dotc(&re_v).re - means[l] * bk.dotc(v).re) / nn;
                let deriv = c.matrix() * bk - bk * C64::new(means[l], 0.0) - v * C64::new(dm, 0.0);
                next += deriv * C64::new(0.5 * w[l * n + k], 0.0);
            }
        }
    }
    finite_ket(next)
}

/// One Euler–Maruyama step of the nonlinear (normalized) filtering equation
/// driven by innovation increments `db`.
pub fn step_nonlinear_diffusive(phi: &Ket, model: &OneParticleModel, db: &[f64], dt: f64) -> Result<Ket> {
    step_nonlinear_diffusive_with(phi, model, db, dt, Scheme::EulerMaruyama)
}

pub fn step_nonlinear_diffusive_with(phi: &Ket, model: &OneParticleModel, db: &[f64], dt: f64, scheme: Scheme) -> Result<Ket> {
    check_dim(model, phi.dim())?;
    check_channels(model, db)?;
    nonlinear_step(model.h.matrix(), &model.channels, phi, db, dt, QuadraticSign::Dissipative, scheme)
}

/// `dχ = −[iH + ½ Σ L*L] χ dt + Σ L χ dY`, no normalization.
pub fn step_linear_diffusive(chi: &Ket, model: &OneParticleModel, dy: &[f64], dt: f64) -> Result<Ket> {
    step_linear_diffusive_with(chi, model, dy, dt, Scheme::EulerMaruyama)
}

pub fn step_linear_diffusive_with(chi: &Ket, model: &OneParticleModel, dy: &[f64], dt: f64, scheme: Scheme) -> Result<Ket> {
    check_dim(model, chi.dim())?;
    check_channels(model, dy)?;
    let v = chi.amplitudes();
    let mut gen = model.h.matrix() * (-I);
    for c in &model.channels {
        gen -= c.adj_op.scale(0.5);
    }
    let mut next = v + (&gen * v) * C64::new(dt, 0.0);
    let lvs: Vec<CVector> = model.channels.iter().map(|c| c.matrix() * v).collect();
    for (lv, &y) in lvs.iter().zip(dy) {
        next += lv * C64::new(y, 0.0);
    }
    if scheme == Scheme::Milstein {
        let w = milstein_weights(dy, dt);
        let n = model.channel_count();
        for (l, c) in model.channels.iter().enumerate() {
            for (k, lv) in lvs.iter().enumerate() {
                next += (c.matrix() * lv) * C64::new(0.5 * w[l * n + k], 0.0);
            }
        }
    }
    finite_ket(next)
}

pub(crate) fn density_step(
    h: &CMatrix,
    channels: &[Channel],
    gamma: &CMatrix,
    db: &[f64],
    dt: f64,
    scheme: Scheme,
) -> Result<DensityOp> {
    let mut drift = commutator(h, gamma) * (-I);
    let mut noise = CMatrix::zeros(gamma.nrows(), gamma.ncols());
    let mut weights = Vec::with_capacity(channels.len());
    let mut coeffs = Vec::with_capacity(channels.len());
    for (c, &b) in channels.iter().zip(db) {
        let lg = c.matrix() * gamma;
        drift += &lg * &c.adj - anticommutator(&c.adj_op, gamma).scale(0.5);
        let gl_adj = gamma * &c.adj;
        let weight = 2.0 * crate::hilbert::trace_of_product(gamma, &c.re).re;
        let g = gl_adj + lg - gamma.scale(weight);
        noise += g.scale(b);
        weights.push(weight);
        coeffs.push(g);
    }
    let mut next = gamma + drift.scale(dt) + noise;
    if scheme == Scheme::Milstein {
        let w = milstein_weights(db, dt);
        let n = channels.len();
        for (l, c) in channels.iter().enumerate() {
            for (k, gk) in coeffs.iter().enumerate() {
                let dw = 2.0 * crate::hilbert::trace_of_product(gk, &c.re).re;
                let deriv = gk * &c.adj + c.matrix() * gk - gk.scale(weights[l]) - gamma.scale(dw);
                next += deriv.scale(0.5 * w[l * n + k]);
            }
        }
    }
    finite_density(next)
}

/// Density-matrix form of the diffusive filtering equation.
pub fn step_density_diffusive(gamma: &DensityOp, model: &OneParticleModel, db: &[f64], dt: f64) -> Result<DensityOp> {
    step_density_diffusive_with(gamma, model, db, dt, Scheme::EulerMaruyama)
}

pub fn step_density_diffusive_with(
    gamma: &DensityOp,
    model: &OneParticleModel,
    db: &[f64],
    dt: f64,
    scheme: Scheme,
) -> Result<DensityOp> {
    check_dim(model, gamma.dim())?;
    check_channels(model, db)?;
    density_step(model.h.matrix(), &model.channels, gamma.matrix(), db, dt, scheme)
}

/// `dY = dB + ⟨L + L*⟩ dt` per channel.
pub fn innovation_to_output<S: QuantumState>(state: &S, model: &OneParticleModel, db: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_channels(model, db)?;
    Ok(model
        .channels
        .iter()
        .zip(db)
        .map(|(c, &b)| b + 2.0 * state.expect(&c.re).re * dt)
        .collect())
}

/// Inverse of [`innovation_to_output`].
pub fn output_to_innovation<S: QuantumState>(state: &S, model: &OneParticleModel, dy: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_channels(model, dy)?;
    Ok(model
        .channels
        .iter()
        .zip(dy)
        .map(|(c, &y)| y - 2.0 * state.expect(&c.re).re * dt)
        .collect())
}

pub(crate) fn counting_density_step(
    h: &CMatrix,
    channels: &[Channel],
    gamma: &CMatrix,
    jumps: &[u32],
    dt: f64,
) -> Result<DensityOp> {
    let mut drift = commutator(h, gamma) * (-I);
    for c in channels {
        let weight = crate::hilbert::trace_of_product(&c.adj_op, gamma).re;
        drift += gamma.scale(weight) - anticommutator(&c.adj_op, gamma).scale(0.5);
    }
    let mut next = gamma + drift.scale(dt);
    for (k, (c, &count)) in channels.iter().zip(jumps).enumerate() {
        for _ in 0..count {
            let jumped = c.matrix() * &next * &c.adj;
            let weight = jumped.trace().re;
            if !(weight >= DEGENERATE_JUMP_TOL) {
                return Err(Error::DegenerateJump { channel: k, weight });
            }
            next = jumped.unscale(weight);
        }
    }
    finite_density(next)
}

/// Counting observation, density form: deterministic drift over the step,
/// then `γ ← LγL*/tr(LγL*)` once per recorded event.
pub fn step_counting_density(gamma: &DensityOp, model: &OneParticleModel, jumps: &[u32], dt: f64) -> Result<DensityOp> {
    check_dim(model, gamma.dim())?;
    if jumps.len() != model.channel_count() {
        return Err(Error::Shape(format!("{} jump flags for {} channels", jumps.len(), model.channel_count())));
    }
    counting_density_step(model.h.matrix(), &model.channels, gamma.matrix(), jumps, dt)
}

pub(crate) fn counting_pure_step(h: &CMatrix, channels: &[Channel], phi: &Ket, jumps: &[u32], dt: f64) -> Result<Ket> {
    let v = phi.amplitudes();
    let mut next = v - (h * v) * C64::new(0.0, dt);
    for (c, &count) in channels.iter().zip(jumps) {
        for _ in 0..count {
            next = c.matrix() * next;
        }
    }
    finite_ket(next)
}

/// Counting observation with unitary couplings: `dφ = −iHφ dt` between
/// events and `φ ← Lφ` at each event.
pub fn step_counting_pure_unitary(phi: &Ket, model: &OneParticleModel, jumps: &[u32], dt: f64) -> Result<Ket> {
    check_dim(model, phi.dim())?;
    if jumps.len() != model.channel_count() {
        return Err(Error::Shape(format!("{} jump flags for {} channels", jumps.len(), model.channel_count())));
    }
    model.require_unitary()?;
    counting_pure_step(model.h.matrix(), &model.channels, phi, jumps, dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Project back to unit norm / trace after every step.
    pub renormalize: bool,
    /// Eigen-decompose every density state and count positivity violations.
    pub check_psd: bool,
    pub scheme: Scheme,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            renormalize: true,
            check_psd: false,
            scheme: Scheme::EulerMaruyama,
        }
    }
}

impl RunOptions {
    pub fn raw() -> Self {
        RunOptions {
            renormalize: false,
            check_psd: false,
            scheme: Scheme::EulerMaruyama,
        }
    }

    pub fn with_scheme(self, scheme: Scheme) -> Self {
        RunOptions { scheme, ..self }
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryRecord<S> {
    pub grid: TimeGrid,
    /// `steps + 1` states, the first being the initial condition.
    pub states: Vec<S>,
    /// Per step and channel: `dY` for diffusive runs, event counts for counting runs.
    pub outputs: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    pub traces: Vec<f64>,
    pub psd_violations: usize,
}

impl<S: QuantumState> TrajectoryRecord<S> {
    fn start(grid: TimeGrid, s0: S) -> Self {
        let mut rec = TrajectoryRecord {
            grid,
            states: Vec::with_capacity(grid.steps() + 1),
            outputs: Vec::with_capacity(grid.steps()),
            norms: Vec::with_capacity(grid.steps() + 1),
            traces: Vec::with_capacity(grid.steps() + 1),
            psd_violations: 0,
        };
        rec.push(s0);
        rec
    }

    fn push(&mut self, s: S) {
        self.norms.push(s.norm());
        self.traces.push(s.trace());
        self.states.push(s);
    }

    pub fn last(&self) -> &S {
        self.states.last().expect("record holds the initial state")
    }

    /// `max_t | ‖state_t‖ − 1 |`.
    pub fn max_norm_drift(&self) -> f64 {
        self.norms.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `max_t | tr state_t − 1 |`.
    pub fn max_trace_drift(&self) -> f64 {
        self.traces.iter().map(|t| (t - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Tidy CSV: `t`, `re_<name>`, `im_<name>` per observable, `norm`, `trace`.
    pub fn to_csv(&self, observables: &[(String, CMatrix)]) -> String {
        let mut out = String::from("t");
        for (name, _) in observables {
            let _ = write!(out, ",re_{name},im_{name}");
        }
        out.push_str(",norm,trace\n");
        for (n, s) in self.states.iter().enumerate() {
            let _ = write!(out, "{}", self.grid.time(n));
            for (_, op) in observables {
                let e = s.expect(op);
                let _ = write!(out, ",{},{}", e.re, e.im);
            }
            let _ = writeln!(out, ",{},{}", self.norms[n], self.traces[n]);
        }
        out
    }
}

impl TrajectoryRecord<Ket> {
    /// Binary state dump in the noise-bundle container style: magic `NBST`,
    /// version, grid, dim, then `re, im` pairs per state.
    pub fn write_states<W: Write>(&self, mut w: W) -> Result<()> {
        write_state_header(&mut w, &self.grid, self.states[0].dim(), 0)?;
        for s in &self.states {
            for z in s.as_slice() {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

impl TrajectoryRecord<DensityOp> {
    pub fn write_states<W: Write>(&self, mut w: W) -> Result<()> {
        write_state_header(&mut w, &self.grid, self.states[0].dim(), 1)?;
        for s in &self.states {
            let m = s.matrix();
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    w.write_all(&m[(r, c)].re.to_le_bytes())?;
                    w.write_all(&m[(r, c)].im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

fn write_state_header<W: Write>(w: &mut W, grid: &TimeGrid, dim: usize, kind: u32) -> Result<()> {
    w.write_all(b"NBST")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&grid.t_end().to_le_bytes())?;
    w.write_all(&grid.dt().to_le_bytes())?;
    w.write_all(&(grid.steps() as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    w.write_all(&kind.to_le_bytes())?;
    Ok(())
}

fn renormalize_ket(v: Ket) -> Result<Ket> {
    v.normalized().map_err(|_| Error::BlowUp { step: None })
}

fn renormalize_density(g: DensityOp) -> Result<DensityOp> {
    g.normalized().map_err(|_| Error::BlowUp { step: None })
}

fn require_wiener(model: &OneParticleModel, noise: &NoiseBundle) -> Result<()> {
    if !noise.has_wiener() || noise.channels() != model.channel_count() {
        return Err(Error::Shape(format!(
            "need Wiener noise with {} channels, bundle has {}",
            model.channel_count(),
            noise.channels()
        )));
    }
    Ok(())
}

fn require_poisson(model: &OneParticleModel, noise: &NoiseBundle) -> Result<()> {
    if !noise.has_poisson() || noise.channels() != model.channel_count() {
        return Err(Error::Shape(format!(
            "need Poisson events with {} channels, bundle has {}",
            model.channel_count(),
            noise.channels()
        )));
    }
    Ok(())
}

/// Nonlinear filtering trajectory driven by the bundle's innovations.
pub fn simulate_nonlinear(phi0: &Ket, model: &OneParticleModel, noise: &NoiseBundle, opts: RunOptions) -> Result<TrajectoryRecord<Ket>> {
    require_wiener(model, noise)?;
    let grid = *noise.grid();
    let mut rec = TrajectoryRecord::start(grid, phi0.clone());
    let mut phi = phi0.clone();
    for n in 0..grid.steps() {
        let db = noise.dw(n);
        rec.outputs.push(innovation_to_output(&phi, model, db, grid.dt())?);
        phi = step_nonlinear_diffusive_with(&phi, model, db, grid.dt(), opts.scheme).map_err(|e| e.at_step(n))?;
        if opts.renormalize {
            phi = renormalize_ket(phi).map_err(|e| e.at_step(n))?;
        }
        rec.push(phi.clone());
    }
    Ok(rec)
}

/// Linear filtering trajectory. The bundle supplies innovations; the output
/// increments are reconstructed from the current (normalized) linear state,
/// so the same bundle drives [`simulate_nonlinear`] along the same output path.
pub fn simulate_linear(chi0: &Ket, model: &OneParticleModel, noise: &NoiseBundle, scheme: Scheme) -> Result<TrajectoryRecord<Ket>> {
    require_wiener(model, noise)?;
    let grid = *noise.grid();
    let mut rec = TrajectoryRecord::start(grid, chi0.clone());
    let mut chi = chi0.clone();
    for n in 0..grid.steps() {
        let dy = innovation_to_output(&chi, model, noise.dw(n), grid.dt())?;
        chi = step_linear_diffusive_with(&chi, model, &dy, grid.dt(), scheme).map_err(|e| e.at_step(n))?;
        rec.outputs.push(dy);
        rec.push(chi.clone());
    }
    Ok(rec)
}

fn flag_psd(rec_violations: &mut usize, g: &DensityOp, opts: RunOptions) {
    if opts.check_psd && g.min_eigenvalue() < -PSD_FLAG_TOL {
        *rec_violations += 1;
    }
}

pub fn simulate_density(gamma0: &DensityOp, model: &OneParticleModel, noise: &NoiseBundle, opts: RunOptions) -> Result<TrajectoryRecord<DensityOp>> {
    require_wiener(model, noise)?;
    let grid = *noise.grid();
    let mut rec = TrajectoryRecord::start(grid, gamma0.clone());
    let mut gamma = gamma0.clone();
    for n in 0..grid.steps() {
        let db = noise.dw(n);
        rec.outputs.push(innovation_to_output(&gamma, model, db, grid.dt())?);
        gamma = step_density_diffusive_with(&gamma, model, db, grid.dt(), opts.scheme).map_err(|e| e.at_step(n))?;
        if opts.renormalize {
            gamma = renormalize_density(gamma).map_err(|e| e.at_step(n))?;
        }
        flag_psd(&mut rec.psd_violations, &gamma, opts);
        rec.push(gamma.clone());
    }
    Ok(rec)
}

/// Counting trajectory on a prescribed event path.
pub fn simulate_counting_density(gamma0: &DensityOp, model: &OneParticleModel, noise: &NoiseBundle, opts: RunOptions) -> Result<TrajectoryRecord<DensityOp>> {
    require_poisson(model, noise)?;
    let grid = *noise.grid();
    let mut rec = TrajectoryRecord::start(grid, gamma0.clone());
    let mut gamma = gamma0.clone();
    for n in 0..grid.steps() {
        let jumps = noise.jumps(n);
        gamma = step_counting_density(&gamma, model, jumps, grid.dt()).map_err(|e| e.at_step(n))?;
        if opts.renormalize {
            gamma = renormalize_density(gamma).map_err(|e| e.at_step(n))?;
        }
        flag_psd(&mut rec.psd_violations, &gamma, opts);
        rec.outputs.push(jumps.iter().map(|&k| k as f64).collect());
        rec.push(gamma.clone());
    }
    Ok(rec)
}

pub fn simulate_counting_pure_unitary(phi0: &Ket, model: &OneParticleModel, noise: &NoiseBundle, opts: RunOptions) -> Result<TrajectoryRecord<Ket>> {
    require_poisson(model, noise)?;
    model.require_unitary()?;
    let grid = *noise.grid();
    let mut rec = TrajectoryRecord::start(grid, phi0.clone());
    let mut phi = phi0.clone();
    for n in 0..grid.steps() {
        let jumps = noise.jumps(n);
        phi = counting_pure_step(model.h.matrix(), &model.channels, &phi, jumps, grid.dt()).map_err(|e| e.at_step(n))?;
        if opts.renormalize {
            phi = renormalize_ket(phi).map_err(|e| e.at_step(n))?;
        }
        rec.outputs.push(jumps.iter().map(|&k| k as f64).collect());
        rec.push(phi.clone());
    }
    Ok(rec)
}

/// Counting trajectory for general couplings: channel `l` fires with the
/// state-dependent intensity `tr(L*L γ)`, realized by thinning a stream of
/// rate `‖L‖²` and evaluated at the state entering each step.
pub fn simulate_counting_thinned(
    gamma0: &DensityOp,
    model: &OneParticleModel,
    grid: &TimeGrid,
    seed: SeedSpec,
    opts: RunOptions,
) -> Result<TrajectoryRecord<DensityOp>> {
    check_dim(model, gamma0.dim())?;
    let mut streams = Vec::with_capacity(model.channel_count());
    let mut pending = Vec::with_capacity(model.channel_count());
    for (k, c) in model.channels.iter().enumerate() {
        let cap = c.op.norm().powi(2);
        if cap == 0.0 {
            streams.push(None);
            pending.push((f64::INFINITY, 0.0));
            continue;
        }
        let mut s = ThinningStream::new(seed, k, cap)?;
        pending.push(s.next_candidate());
        streams.push(Some(s));
    }
    let mut rec = TrajectoryRecord::start(*grid, gamma0.clone());
    let mut gamma = gamma0.clone();
    let mut jumps = vec![0u32; model.channel_count()];
    for n in 0..grid.steps() {
        let t_next = grid.time(n + 1);
        for (k, c) in model.channels.iter().enumerate() {
            jumps[k] = 0;
            let Some(s) = streams[k].as_mut() else { continue };
            let lambda = QuantumState::expect(&gamma, &c.adj_op).re.max(0.0);
            while pending[k].0 < t_next {
                let (t, u) = pending[k];
                if s.accept(t, lambda, u)? {
                    jumps[k] += 1;
                }
                pending[k] = s.next_candidate();
            }
        }
        gamma = step_counting_density(&gamma, model, &jumps, grid.dt()).map_err(|e| e.at_step(n))?;
        if opts.renormalize {
            gamma = renormalize_density(gamma).map_err(|e| e.at_step(n))?;
        }
        flag_psd(&mut rec.psd_violations, &gamma, opts);
        rec.outputs.push(jumps.iter().map(|&k| k as f64).collect());
        rec.push(gamma.clone());
    }
    Ok(rec)
}

/// Trace distance `tr|γ − φφ*|` between a density and a (normalized) ket.
pub fn trace_distance_to_ket(gamma: &DensityOp, phi: &Ket) -> f64 {
    let p = phi.outer().unscale(phi.norm_sqr());
    crate::hilbert::trace_norm(&(gamma.matrix() - p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{presets, random};

    fn qubit(h: BoundedOp, l: BoundedOp) -> OneParticleModel {
        OneParticleModel::new(h, vec![l]).unwrap()
    }

    fn close(a: &CVector, b: &CVector, tol: f64) -> bool {
        (a - b).camax() <= tol
    }

    #[test]
    fn linear_step_without_coupling_is_euler_schroedinger() {
        let h = presets::pauli_x();
        let model = qubit(h.clone(), BoundedOp::zeros(2));
        let chi = random::ket(&mut random::rng(1), 2);
        let dt = 0.01;
        let got = step_linear_diffusive(&chi, &model, &[0.37], dt).unwrap();
        let want = chi.amplitudes() - (h.matrix() * chi.amplitudes()) * C64::new(0.0, dt);
        assert!(close(got.amplitudes(), &want, 1e-15));
    }

    #[test]
    fn linear_step_hermitian_coupling_without_output() {
        let l = presets::pauli_z().scale(0.8);
        let model = qubit(BoundedOp::zeros(2), l.clone());
        let chi = random::ket(&mut random::rng(2), 2);
        let dt = 0.02;
        let got = step_linear_diffusive(&chi, &model, &[0.0], dt).unwrap();
        let l2 = l.matrix() * l.matrix();
        let want = chi.amplitudes() - (l2 * chi.amplitudes()).scale(0.5 * dt);
        assert!(close(got.amplitudes(), &want, 1e-15));
    }

    #[test]
    fn eigenvector_of_hermitian_coupling_is_a_measurement_fixed_point() {
        let model = qubit(BoundedOp::zeros(2), presets::pauli_z());
        let e0 = Ket::basis(2, 0).unwrap();
        for db in [-0.3, 0.0, 0.9] {
            let next = step_nonlinear_diffusive(&e0, &model, &[db], 0.01).unwrap();
            assert!(close(next.amplitudes(), e0.amplitudes(), 1e-15));
        }
    }

    #[test]
    fn anti_hermitian_coupling_nonlinear_equals_linear() {
        let mut rng = random::rng(3);
        let h = random::hermitian(&mut rng, 3, 1.0);
        let l = random::anti_hermitian(&mut rng, 3, 0.7);
        let model = qubit(h, l);
        let phi = random::ket(&mut rng, 3);
        // ⟨Re L⟩ = 0, so innovations and outputs coincide
        let dy = innovation_to_output(&phi, &model, &[0.05], 0.01).unwrap();
        assert!((dy[0] - 0.05).abs() < 1e-15);
        let a = step_nonlinear_diffusive(&phi, &model, &[0.05], 0.01).unwrap();
        let b = step_linear_diffusive(&phi, &model, &dy, 0.01).unwrap();
        assert!(close(a.amplitudes(), b.amplitudes(), 1e-14));
    }

    #[test]
    fn density_step_without_coupling_is_von_neumann() {
        let mut rng = random::rng(4);
        let h = random::hermitian(&mut rng, 3, 1.0);
        let model = qubit(h.clone(), BoundedOp::zeros(3));
        let g = random::density(&mut rng, 3, 2);
        let dt = 0.01;
        let got = step_density_diffusive(&g, &model, &[0.4], dt).unwrap();
        let want = g.matrix() - commutator(h.matrix(), g.matrix()) * C64::new(0.0, dt);
        assert!((got.matrix() - want).camax() < 1e-15);
    }

    #[test]
    fn eigenprojector_is_density_fixed_point() {
        let model = qubit(BoundedOp::zeros(2), presets::pauli_z().scale(1.3));
        let p = Ket::basis(2, 1).unwrap().projector().unwrap();
        let got = step_density_diffusive(&p, &model, &[0.7], 0.01).unwrap();
        assert!((got.matrix() - p.matrix()).camax() < 1e-15);
    }

    #[test]
    fn output_for_eigenstate_shifts_by_twice_eigenvalue() {
        let model = qubit(BoundedOp::zeros(2), presets::pauli_z().scale(0.5));
        let e1 = Ket::basis(2, 1).unwrap();
        let dy = innovation_to_output(&e1, &model, &[0.1], 0.01).unwrap();
        assert!((dy[0] - (0.1 + 2.0 * -0.5 * 0.01)).abs() < 1e-15);
        let back = output_to_innovation(&e1, &model, &dy, 0.01).unwrap();
        assert!((back[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unitary_jump_is_exact_conjugation() {
        let mut rng = random::rng(5);
        let u = random::unitary(&mut rng, 3);
        let model = qubit(BoundedOp::zeros(3), u.clone());
        let g = random::density(&mut rng, 3, 3);
        let got = step_counting_density(&g, &model, &[1], 1e-3).unwrap();
        // unitary coupling: no drift besides the (zero) Hamiltonian
        let want = u.matrix() * g.matrix() * u.matrix().adjoint();
        assert!((got.matrix() - want).camax() < 1e-13);
        assert!((got.trace() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_coupling_never_jumps_and_is_von_neumann() {
        let h = presets::pauli_y();
        let model = qubit(h.clone(), BoundedOp::zeros(2));
        let g = DensityOp::maximally_mixed(2);
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let rec = simulate_counting_thinned(&g, &model, &grid, SeedSpec::new(1, 1), RunOptions::raw()).unwrap();
        assert!(rec.outputs.iter().all(|o| o[0] == 0.0));
        let pure = Ket::basis(2, 0).unwrap().projector().unwrap();
        let got = step_counting_density(&pure, &model, &[0], 0.01).unwrap();
        let want = pure.matrix() - commutator(h.matrix(), pure.matrix()) * C64::new(0.0, 0.01);
        assert!((got.matrix() - want).camax() < 1e-15);
    }

    #[test]
    fn degenerate_jump_is_an_error() {
        let model = qubit(BoundedOp::zeros(2), presets::lowering());
        // lowering annihilates |0⟩
        let p = Ket::basis(2, 0).unwrap().projector().unwrap();
        let err = step_counting_density(&p, &model, &[1], 1e-3).unwrap_err();
        assert!(matches!(err, Error::DegenerateJump { channel: 0, .. }));
    }

    #[test]
    fn pure_counting_rejects_non_unitary_and_trivial_identity_jumps() {
        let phi = Ket::basis(2, 0).unwrap();
        let bad = qubit(BoundedOp::zeros(2), presets::lowering());
        assert!(matches!(step_counting_pure_unitary(&phi, &bad, &[0], 0.1), Err(Error::Contract(_))));
        let trivial = qubit(presets::pauli_z(), BoundedOp::identity(2));
        let a = step_counting_pure_unitary(&phi, &trivial, &[3], 0.01).unwrap();
        let b = step_counting_pure_unitary(&phi, &trivial, &[0], 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_counting_without_jumps_is_euler_schroedinger() {
        let model = qubit(presets::pauli_x(), presets::pauli_z());
        let phi = Ket::basis(2, 0).unwrap();
        let got = step_counting_pure_unitary(&phi, &model, &[0], 0.01).unwrap();
        let want = phi.amplitudes() - (presets::pauli_x().matrix() * phi.amplitudes()) * C64::new(0.0, 0.01);
        assert!(close(got.amplitudes(), &want, 1e-15));
        // exact flow conserves the norm; Euler drifts by O(dt²) per step
        assert!((got.norm() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn blow_up_reports_step_index() {
        let h = presets::pauli_x().scale(1e200);
        let model = qubit(h, presets::pauli_z());
        let grid = TimeGrid::new(0.1, 0.01).unwrap();
        let noise = crate::noise::sample_wiener(&grid, 1, SeedSpec::new(0, 0)).unwrap();
        let err = simulate_nonlinear(&Ket::basis(2, 0).unwrap(), &model, &noise, RunOptions::raw()).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step: Some(_) }), "{err:?}");
    }

    #[test]
    fn model_rejects_non_hermitian_hamiltonian() {
        assert!(OneParticleModel::new(presets::lowering(), vec![presets::pauli_x()]).is_err());
        assert!(OneParticleModel::new(presets::pauli_x(), vec![]).is_err());
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let model = qubit(presets::pauli_z(), presets::pauli_x().scale(0.5));
        let grid = TimeGrid::new(0.05, 0.01).unwrap();
        let noise = crate::noise::sample_wiener(&grid, 1, SeedSpec::new(2, 0)).unwrap();
        let rec = simulate_nonlinear(&Ket::basis(2, 0).unwrap(), &model, &noise, RunOptions::default()).unwrap();
        let csv = rec.to_csv(&[("sz".into(), presets::pauli_z().into_matrix())]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,re_sz,im_sz,norm,trace");
        assert_eq!(lines.len(), grid.steps() + 2);
        let mut dump = Vec::new();
        rec.write_states(&mut dump).unwrap();
        assert_eq!(&dump[..4], b"NBST");
    }
}
