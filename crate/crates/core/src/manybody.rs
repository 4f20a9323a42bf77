//! `N` identical particles, each observed through its own channel(s), with
//! mean-field pair interaction `(1/N) Σ_{i<j} A_ij` and per-particle feedback
//! through the one-particle reduced density.
//!
//! Operators act structurally on the `d^N` amplitude vector; no `d^N × d^N`
//! matrix is ever formed on the stepping path.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::OneParticleModel;
use crate::hilbert::{
    lift_pair_in, lift_single_in, BoundedOp, CMatrix, DensityOp, Ket, PairKernel, TensorLayout, C64,
    DEFAULT_MAX_STATE_DIM, HERMITIAN_TOL, I, ZERO,
};
use crate::hilbert::tensor::row_major;
use crate::noise::{NoiseBundle, TimeGrid};

#[derive(Clone, Debug, PartialEq)]
pub enum ControlPolicy {
    Constant { u0: f64 },
    /// `u(t, γ) = clamp(U · tr(γ W), −U, U)`.
    Feedback { bound: f64, w: BoundedOp },
}

impl ControlPolicy {
    pub fn constant(u0: f64) -> Result<Self> {
        if !u0.is_finite() {
            return Err(Error::Invariant("constant control must be finite".into()));
        }
        Ok(ControlPolicy::Constant { u0 })
    }

    pub fn feedback(bound: f64, w: BoundedOp) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::Invariant(format!("control bound must be finite and ≥ 0, got {bound}")));
        }
        if !w.is_hermitian(HERMITIAN_TOL) {
            return Err(Error::Invariant("feedback observable W must be Hermitian".into()));
        }
        Ok(ControlPolicy::Feedback { bound, w })
    }

    /// `U`, the bound on `|u|`.
    pub fn bound(&self) -> f64 {
        match self {
            ControlPolicy::Constant { u0 } => u0.abs(),
            ControlPolicy::Feedback { bound, .. } => *bound,
        }
    }

    /// Lipschitz constant in trace norm: `U ‖W‖` for feedback, 0 for constants.
    pub fn kappa(&self) -> f64 {
        match self {
            ControlPolicy::Constant { .. } => 0.0,
            ControlPolicy::Feedback { bound, w } => bound * w.norm(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ControlPolicy::Constant { .. })
    }

    /// Control value for a one-particle density `gamma` (normalized here).
    pub fn evaluate(&self, _t: f64, gamma: &CMatrix) -> f64 {
        let u = match self {
            ControlPolicy::Constant { u0 } => *u0,
            ControlPolicy::Feedback { bound, w } => {
                let tr = gamma.trace().re;
                let e = crate::hilbert::trace_of_product(gamma, w.matrix()).re / tr;
                (bound * e).clamp(-bound, *bound)
            }
        };
        assert!(u.abs() <= self.bound(), "control {u} escaped its bound {}", self.bound());
        u
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            ControlPolicy::Constant { .. } => None,
            ControlPolicy::Feedback { w, .. } => Some(w.dim()),
        }
    }
}

/// Observation type shared by the N-body system and its limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Diffusive,
    Counting,
}

/// How the per-particle parts of a diffusive N-body step are combined.
///
/// `EulerMaruyama` adds them: `Ψ + Σ_j M_j Ψ`. `Factorized` applies them in
/// turn, `Π_j (1 + M_j) Ψ`, which adds the cross terms `M_i M_j` for `i ≠ j`.
/// Their noise parts are `K_i K_j ΔB_i ΔB_j`, the exact second-order Itô terms
/// for these commuting channels, so uncoupled particles stay exactly in
/// product form and the N-body step agrees with N separate one-particle
/// steps at the discretization level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManyBodyScheme {
    EulerMaruyama,
    #[default]
    Factorized,
}

#[derive(Clone, Debug)]
pub struct ManyBodyModel {
    one: OneParticleModel,
    hhat: BoundedOp,
    a: PairKernel,
    control: ControlPolicy,
    layout: TensorLayout,
    scheme: ManyBodyScheme,
    a_rm: Vec<C64>,
    l_rm: Vec<Vec<C64>>,
}

impl ManyBodyModel {
    pub fn new(one: OneParticleModel, hhat: BoundedOp, a: PairKernel, n: usize, control: ControlPolicy) -> Result<Self> {
        Self::with_capacity(one, hhat, a, n, control, DEFAULT_MAX_STATE_DIM)
    }

    pub fn with_capacity(
        one: OneParticleModel,
        hhat: BoundedOp,
        a: PairKernel,
        n: usize,
        control: ControlPolicy,
        max_dim: usize,
    ) -> Result<Self> {
        let d = one.dim();
        if n == 0 {
            return Err(Error::Shape("particle count must be at least 1".into()));
        }
        if hhat.dim() != d {
            return Err(Error::Shape(format!("Hhat has dim {}, model dim is {d}", hhat.dim())));
        }
        if !hhat.is_hermitian(HERMITIAN_TOL) {
            return Err(Error::Invariant("Hhat must be Hermitian".into()));
        }
        if a.one_particle_dim() != d {
            return Err(Error::Shape(format!("pair kernel over d = {}, model dim is {d}", a.one_particle_dim())));
        }
        if let Some(wd) = control.dim() {
            if wd != d {
                return Err(Error::Shape(format!("feedback observable has dim {wd}, model dim is {d}")));
            }
        }
        let layout = TensorLayout::with_capacity(d, n, max_dim)?;
        let a_rm = row_major(a.matrix());
        let l_rm = one.channels().iter().map(|c| row_major(c.matrix())).collect();
        Ok(ManyBodyModel {
            one,
            hhat,
            a,
            control,
            layout,
            scheme: ManyBodyScheme::default(),
            a_rm,
            l_rm,
        })
    }

    pub fn with_scheme(mut self, scheme: ManyBodyScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn scheme(&self) -> ManyBodyScheme {
        self.scheme
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

    pub fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn dim(&self) -> usize {
        self.one.dim()
    }

    /// Noise channels consumed per step: particles × coupling channels,
    /// particle-major.
    pub fn noise_channels(&self) -> usize {
        self.n() * self.one.channel_count()
    }

    fn check_state(&self, psi: &Ket) -> Result<()> {
        if psi.dim() != self.layout.total() {
            return Err(Error::Shape(format!(
                "state of dim {} for {} particles of dim {}",
                psi.dim(),
                self.n(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `H + u Ĥ` for one particle.
    pub fn controlled_hamiltonian(&self, u: f64) -> CMatrix {
        self.one.hamiltonian().matrix() + self.hhat.matrix().scale(u)
    }

    /// Adds `coeff · (1/N) Σ_{i<j} A_ij · input` to `out`.
    fn apply_interaction_into(&self, coeff: C64, input: &[C64], out: &mut [C64]) {
        if self.a.is_zero() {
            return;
        }
        let n = self.n();
        let c = coeff / n as f64;
        for i in 0..n {
            for j in i + 1..n {
                self.layout.apply_pair_into(&self.a_rm, i, j, c, input, out);
            }
        }
    }
}

/// `Σ_j (H_j + u_j Ĥ_j) + (1/N) Σ_{i<j} A_ij` as a dense `d^N × d^N` matrix.
/// Intended for small systems and tests.
pub fn build_hamiltonian(model: &ManyBodyModel, u: &[f64]) -> Result<BoundedOp> {
    let n = model.n();
    if u.len() != n {
        return Err(Error::Shape(format!("{} control values for {n} particles", u.len())));
    }
    let layout = &model.layout;
    let total = layout.total();
    let mut h = CMatrix::zeros(total, total);
    for (j, &uj) in u.iter().enumerate() {
        let one = BoundedOp::new(model.controlled_hamiltonian(uj))?;
        h += lift_single_in(layout, &one, j)?.matrix();
    }
    if !model.a.is_zero() {
        for i in 0..n {
            for j in i + 1..n {
                h += lift_pair_in(layout, &model.a, i, j)?.matrix().unscale(n as f64);
            }
        }
    }
    BoundedOp::new(h)
}

/// One-particle reduced density `tr_{all but j} |Ψ⟩⟨Ψ| / ‖Ψ‖²`.
pub fn reduced_density(psi: &Ket, model: &ManyBodyModel, j: usize) -> Result<DensityOp> {
    model.check_state(psi)?;
    model.layout.check_particle(j)?;
    let g = model.layout.reduced_density(psi.as_slice(), j);
    let tr = g.trace().re;
    if tr == 0.0 {
        return Err(Error::UndefinedExpectation);
    }
    Ok(DensityOp::from_matrix_unchecked(g.unscale(tr)))
}

/// Per-particle quantities seen by one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleDiagnostics {
    pub u: f64,
    /// `⟨Re L_l⟩` on this particle, per coupling channel.
    pub mean_re_l: Vec<f64>,
    /// Normalized one-particle reduced density entering the step.
    pub gamma: CMatrix,
}

fn marginals(psi: &Ket, model: &ManyBodyModel, t: f64) -> Vec<ParticleDiagnostics> {
    let nn = psi.norm_sqr();
    (0..model.n())
        .map(|j| {
            let gamma = model.layout.reduced_density(psi.as_slice(), j).unscale(nn);
            let u = model.control.evaluate(t, &gamma);
            let mean_re_l = model
                .one
                .channels()
                .iter()
                .map(|c| crate::hilbert::trace_of_product(c.real_part(), &gamma).re)
                .collect();
            ParticleDiagnostics { u, mean_re_l, gamma }
        })
        .collect()
}

fn finite(v: Vec<C64>) -> Result<Ket> {
    Ket::from_slice(&v).map_err(|_| Error::BlowUp { step: None })
}

/// One step of the N-particle nonlinear filtering equation with
/// per-particle feedback (see [`ManyBodyScheme`]), also returning the per-particle diagnostics
/// evaluated at the start of the step.
pub fn step_npart_diffusive_diag(
    psi: &Ket,
    model: &ManyBodyModel,
    t: f64,
    db: &[f64],
    dt: f64,
) -> Result<(Ket, Vec<ParticleDiagnostics>)> {
    model.check_state(psi)?;
    if db.len() != model.noise_channels() {
        return Err(Error::Shape(format!(
            "{} noise values for {} channels",
            db.len(),
            model.noise_channels()
        )));
    }
    if psi.norm_sqr() == 0.0 {
        return Err(Error::UndefinedExpectation);
    }
    let diags = marginals(psi, model, t);
    let d = model.dim();
    let channels = model.one.channels();
    let nc = channels.len();
    let input = psi.as_slice();
    let mut out = input.to_vec();
    let id = CMatrix::identity(d, d);
    for (j, pd) in diags.iter().enumerate() {
        let mut gen = model.controlled_hamiltonian(pd.u) * (-I);
        let mut noise = CMatrix::zeros(d, d);
        for (l, c) in channels.iter().enumerate() {
            let m = pd.mean_re_l[l];
            let quad = c.adjoint_times_op() - (c.matrix() + c.adjoint()).scale(m) + id.scale(m * m);
            gen += c.imag_part() * C64::new(0.0, m) - quad.scale(0.5);
            noise += (c.matrix() - id.scale(m)).scale(db[j * nc + l]);
        }
        let step_op = row_major(&(gen.scale(dt) + noise));
        match model.scheme {
            ManyBodyScheme::EulerMaruyama => {
                model.layout.apply_single_into(&step_op, j, C64::new(1.0, 0.0), input, &mut out);
            }
            ManyBodyScheme::Factorized => {
                let current = out.clone();
                model.layout.apply_single_into(&step_op, j, C64::new(1.0, 0.0), &current, &mut out);
            }
        }
    }
    model.apply_interaction_into(C64::new(0.0, -dt), input, &mut out);
    Ok((finite(out)?, diags))
}

pub fn step_npart_diffusive(psi: &Ket, model: &ManyBodyModel, t: f64, db: &[f64], dt: f64) -> Result<Ket> {
    step_npart_diffusive_diag(psi, model, t, db, dt).map(|(k, _)| k)
}

/// Counting observation with unitary couplings: `−i H_u(N) Ψ dt` between
/// events, `Ψ ← (L_l)_j Ψ` for each event on particle `j`, channel `l`.
pub fn step_npart_counting_unitary_diag(
    psi: &Ket,
    model: &ManyBodyModel,
    t: f64,
    jumps: &[u32],
    dt: f64,
) -> Result<(Ket, Vec<ParticleDiagnostics>)> {
    model.check_state(psi)?;
    model.one.require_unitary()?;
    if jumps.len() != model.noise_channels() {
        return Err(Error::Shape(format!(
            "{} jump counts for {} channels",
            jumps.len(),
            model.noise_channels()
        )));
    }
    let diags = marginals(psi, model, t);
    let input = psi.as_slice();
    let mut out = input.to_vec();
    for (j, pd) in diags.iter().enumerate() {
        let h = model.controlled_hamiltonian(pd.u);
        model.layout.apply_single_into(&row_major(&h), j, C64::new(0.0, -dt), input, &mut out);
    }
    model.apply_interaction_into(C64::new(0.0, -dt), input, &mut out);
    let nc = model.one.channel_count();
    for (idx, &count) in jumps.iter().enumerate() {
        let (j, l) = (idx / nc, idx % nc);
        for _ in 0..count {
            let mut next = vec![ZERO; out.len()];
            model.layout.apply_single_into(&model.l_rm[l], j, C64::new(1.0, 0.0), &out, &mut next);
            out = next;
        }
    }
    Ok((finite(out)?, diags))
}

pub fn step_npart_counting_unitary(psi: &Ket, model: &ManyBodyModel, t: f64, jumps: &[u32], dt: f64) -> Result<Ket> {
    step_npart_counting_unitary_diag(psi, model, t, jumps, dt).map(|(k, _)| k)
}

/// Per-step record of an N-particle run; full states are not kept.
#[derive(Clone, Debug)]
pub struct ManyBodyRecord {
    pub grid: TimeGrid,
    pub n: usize,
    pub norms: Vec<f64>,
    /// `particles[step][j]`, evaluated at the start of each step plus once at `T`.
    pub particles: Vec<Vec<ParticleDiagnostics>>,
    pub final_state: Ket,
}

impl ManyBodyRecord {
    pub fn max_norm_drift(&self) -> f64 {
        self.norms.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Tidy CSV: one row per (t, particle) with control, `⟨Re L_l⟩` and
    /// re/im expectations of the given one-particle observables.
    pub fn to_csv(&self, observables: &[(String, CMatrix)]) -> String {
        let channels = self.particles.first().map_or(0, |p| p[0].mean_re_l.len());
        let mut out = String::from("t,particle,u");
        for l in 0..channels {
            let _ = write!(out, ",mean_re_l{l}");
        }
        for (name, _) in observables {
            let _ = write!(out, ",re_{name},im_{name}");
        }
        out.push_str(",norm\n");
        for (step, parts) in self.particles.iter().enumerate() {
            for (j, p) in parts.iter().enumerate() {
                let _ = write!(out, "{},{},{}", self.grid.time(step), j, p.u);
                for m in &p.mean_re_l {
                    let _ = write!(out, ",{m}");
                }
                for (_, op) in observables {
                    let e = crate::hilbert::trace_of_product(op, &p.gamma);
                    let _ = write!(out, ",{},{}", e.re, e.im);
                }
                let _ = writeln!(out, ",{}", self.norms[step]);
            }
        }
        out
    }
}

/// Runs the N-particle system over the bundle's grid. Diffusive runs read
/// the Wiener increments, counting runs the event counts.
pub fn simulate(psi0: &Ket, model: &ManyBodyModel, noise: &NoiseBundle, variant: Variant, renormalize: bool) -> Result<ManyBodyRecord> {
    model.check_state(psi0)?;
    if noise.channels() != model.noise_channels() {
        return Err(Error::Shape(format!(
            "noise bundle has {} channels, model needs {}",
            noise.channels(),
            model.noise_channels()
        )));
    }
    let grid = *noise.grid();
    let mut psi = psi0.clone();
    let mut norms = vec![psi.norm()];
    let mut particles = Vec::with_capacity(grid.steps() + 1);
    for n in 0..grid.steps() {
        let t = grid.time(n);
        let (next, diags) = match variant {
            Variant::Diffusive => step_npart_diffusive_diag(&psi, model, t, noise.dw(n), grid.dt()),
            Variant::Counting => step_npart_counting_unitary_diag(&psi, model, t, noise.jumps(n), grid.dt()),
        }
        .map_err(|e| e.at_step(n))?;
        psi = if renormalize {
            next.normalized().map_err(|_| Error::BlowUp { step: Some(n) })?
        } else {
            next
        };
        norms.push(psi.norm());
        particles.push(diags);
    }
    particles.push(marginals(&psi, model, grid.t_end()));
    Ok(ManyBodyRecord {
        grid,
        n: model.n(),
        norms,
        particles,
        final_state: psi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::{step_counting_pure_unitary, step_nonlinear_diffusive};
    use crate::hilbert::{lift_single, presets, random};

    fn qubit_model(l: BoundedOp, a: PairKernel, n: usize, control: ControlPolicy) -> ManyBodyModel {
        let one = OneParticleModel::new(presets::pauli_z(), vec![l]).unwrap();
        ManyBodyModel::new(one, presets::pauli_x(), a, n, control).unwrap()
    }

    fn kernel(seed: u64) -> PairKernel {
        random::pair_kernel(&mut random::rng(seed), 2, 1.0)
    }

    /// The same N-body system viewed as one big particle with lifted couplings.
    fn materialized(model: &ManyBodyModel, u: &[f64]) -> OneParticleModel {
        let h = build_hamiltonian(model, u).unwrap();
        let mut ls = Vec::new();
        for j in 0..model.n() {
            for c in model.one_particle().channels() {
                ls.push(lift_single(c.op(), j, model.n()).unwrap());
            }
        }
        OneParticleModel::new(h, ls).unwrap()
    }

    #[test]
    fn hamiltonian_small_cases() {
        let m1 = qubit_model(presets::pauli_x(), PairKernel::zero(2), 1, ControlPolicy::constant(0.0).unwrap());
        assert_eq!(build_hamiltonian(&m1, &[0.0]).unwrap().matrix(), presets::pauli_z().matrix());
        let a = kernel(1);
        let m2 = qubit_model(presets::pauli_x(), a.clone(), 2, ControlPolicy::constant(0.0).unwrap());
        let h = build_hamiltonian(&m2, &[0.0, 0.0]).unwrap();
        let z = presets::pauli_z();
        let want = lift_single(&z, 0, 2).unwrap().matrix() + lift_single(&z, 1, 2).unwrap().matrix() + a.matrix().scale(0.5);
        assert!((h.matrix() - want).camax() < 1e-14);
    }

    #[test]
    fn hamiltonian_on_product_ket_matches_loop_oracle() {
        let mut rng = random::rng(2);
        let a = kernel(3);
        let model = qubit_model(presets::pauli_x(), a.clone(), 3, ControlPolicy::constant(0.0).unwrap());
        let u = [0.3, -0.2, 0.1];
        let factors: Vec<Ket> = (0..3).map(|_| random::ket(&mut rng, 2)).collect();
        let psi = Ket::product(&factors).unwrap();
        let got = build_hamiltonian(&model, &u).unwrap().matrix() * psi.amplitudes();
        // loop oracle: explicit index arithmetic, particle 0 slowest
        let h1: Vec<CMatrix> = u.iter().map(|&x| model.controlled_hamiltonian(x)).collect();
        let idx = |a: usize, b: usize, c: usize| a * 4 + b * 2 + c;
        let mut want = vec![ZERO; 8];
        for a0 in 0..2 {
            for a1 in 0..2 {
                for a2 in 0..2 {
                    let v = psi.as_slice()[idx(a0, a1, a2)];
                    for b in 0..2 {
                        want[idx(b, a1, a2)] += h1[0][(b, a0)] * v;
                        want[idx(a0, b, a2)] += h1[1][(b, a1)] * v;
                        want[idx(a0, a1, b)] += h1[2][(b, a2)] * v;
                        for c in 0..2 {
                            let w = v / 3.0;
                            want[idx(b, c, a2)] += a.entry(b, c, a0, a1) * w;
                            want[idx(b, a1, c)] += a.entry(b, c, a0, a2) * w;
                            want[idx(a0, b, c)] += a.entry(b, c, a1, a2) * w;
                        }
                    }
                }
            }
        }
        for k in 0..8 {
            assert!((got[k] - want[k]).norm() < 1e-13);
        }
    }

    #[test]
    fn structural_step_matches_materialized_filter() {
        let mut rng = random::rng(4);
        let l = random::bounded(&mut rng, 2, 0.8);
        let model = qubit_model(l, kernel(5), 3, ControlPolicy::constant(0.4).unwrap()).with_scheme(ManyBodyScheme::EulerMaruyama);
        let psi = random::ket(&mut rng, 8);
        let db = [0.01, -0.03, 0.02];
        let got = step_npart_diffusive(&psi, &model, 0.0, &db, 1e-3).unwrap();
        let big = materialized(&model, &[0.4; 3]);
        let want = step_nonlinear_diffusive(&psi, &big, &db, 1e-3).unwrap();
        assert!((got.amplitudes() - want.amplitudes()).camax() < 1e-14);
    }

    #[test]
    fn feedback_step_matches_materialized_filter_with_frozen_controls() {
        let mut rng = random::rng(6);
        let control = ControlPolicy::feedback(0.5, presets::pauli_z()).unwrap();
        let model = qubit_model(presets::pauli_x(), kernel(7), 2, control).with_scheme(ManyBodyScheme::EulerMaruyama);
        let psi = random::ket(&mut rng, 4);
        let (got, diags) = step_npart_diffusive_diag(&psi, &model, 0.0, &[0.02, 0.05], 1e-3).unwrap();
        let u: Vec<f64> = diags.iter().map(|p| p.u).collect();
        for (j, p) in diags.iter().enumerate() {
            let sz = crate::hilbert::trace_of_product(&p.gamma, presets::pauli_z().matrix()).re;
            assert!((u[j] - 0.5 * sz).abs() < 1e-14);
        }
        let want = step_nonlinear_diffusive(&psi, &materialized(&model, &u), &[0.02, 0.05], 1e-3).unwrap();
        assert!((got.amplitudes() - want.amplitudes()).camax() < 1e-14);
    }

    #[test]
    fn decoupled_product_evolves_factorwise() {
        let mut rng = random::rng(8);
        let l = random::bounded(&mut rng, 2, 0.7);
        let model = qubit_model(l, PairKernel::zero(2), 2, ControlPolicy::constant(0.0).unwrap());
        let f0 = random::ket(&mut rng, 2);
        let f1 = random::ket(&mut rng, 2);
        let psi = Ket::product(&[f0.clone(), f1.clone()]).unwrap();
        let one = model.one_particle();
        let mut state = psi;
        let (mut a, mut b) = (f0, f1);
        for step in 0..50 {
            let db = [0.03 * ((step as f64) * 0.7).sin(), -0.02 * ((step as f64) * 1.3).cos()];
            state = step_npart_diffusive(&state, &model, 0.0, &db, 1e-3).unwrap();
            a = step_nonlinear_diffusive(&a, one, &db[..1], 1e-3).unwrap();
            b = step_nonlinear_diffusive(&b, one, &db[1..], 1e-3).unwrap();
        }
        let prod = Ket::product(&[a, b]).unwrap();
        assert!((state.amplitudes() - prod.amplitudes()).camax() < 1e-14);
        let g0 = reduced_density(&state, &model, 0).unwrap();
        let p0 = reduced_density(&prod, &model, 0).unwrap();
        assert!((g0.matrix() - p0.matrix()).camax() < 1e-14);
    }

    #[test]
    fn plain_euler_factorizes_only_to_first_order() {
        let mut rng = random::rng(14);
        let model = qubit_model(presets::pauli_x(), PairKernel::zero(2), 2, ControlPolicy::constant(0.0).unwrap())
            .with_scheme(ManyBodyScheme::EulerMaruyama);
        let f0 = random::ket(&mut rng, 2);
        let f1 = random::ket(&mut rng, 2);
        let psi = Ket::product(&[f0.clone(), f1.clone()]).unwrap();
        let db = [0.03, -0.02];
        let got = step_npart_diffusive(&psi, &model, 0.0, &db, 1e-3).unwrap();
        let a = step_nonlinear_diffusive(&f0, model.one_particle(), &db[..1], 1e-3).unwrap();
        let b = step_nonlinear_diffusive(&f1, model.one_particle(), &db[1..], 1e-3).unwrap();
        let gap = (got.amplitudes() - Ket::product(&[a, b]).unwrap().amplitudes()).camax();
        // exactly the missing cross term K_0 K_1 ΔB_0 ΔB_1
        assert!(gap > 1e-6 && gap < 1e-3, "{gap}");
    }

    #[test]
    fn single_particle_reduces_to_one_particle_filter() {
        let mut rng = random::rng(9);
        let l = random::bounded(&mut rng, 2, 1.0);
        let model = qubit_model(l, kernel(10), 1, ControlPolicy::constant(0.0).unwrap());
        let psi = random::ket(&mut rng, 2);
        let got = step_npart_diffusive(&psi, &model, 0.0, &[0.04], 1e-3).unwrap();
        let want = step_nonlinear_diffusive(&psi, model.one_particle(), &[0.04], 1e-3).unwrap();
        assert!((got.amplitudes() - want.amplitudes()).camax() < 1e-15);
    }

    #[test]
    fn counting_single_jump_applies_coupling_to_one_factor() {
        let u = BoundedOp::unitary_exp(&presets::pauli_x(), 0.7).unwrap();
        let model = qubit_model(u.clone(), PairKernel::zero(2), 2, ControlPolicy::constant(0.0).unwrap());
        let psi = random::ket(&mut random::rng(11), 4);
        let got = step_npart_counting_unitary(&psi, &model, 0.0, &[1, 0], 0.0).unwrap();
        let want = lift_single(&u, 0, 2).unwrap().matrix() * psi.amplitudes();
        assert!((got.amplitudes() - want).camax() < 1e-15);
        assert!((got.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn counting_matches_materialized_pure_counting() {
        let u = BoundedOp::unitary_exp(&presets::pauli_y(), 0.3).unwrap();
        let model = qubit_model(u, kernel(12), 2, ControlPolicy::feedback(0.5, presets::pauli_z()).unwrap());
        let psi = random::ket(&mut random::rng(13), 4);
        let (got, diags) = step_npart_counting_unitary_diag(&psi, &model, 0.0, &[0, 2], 1e-3).unwrap();
        let controls: Vec<f64> = diags.iter().map(|p| p.u).collect();
        let big = materialized(&model, &controls);
        let want = step_counting_pure_unitary(&psi, &big, &[0, 2], 1e-3).unwrap();
        assert!((got.amplitudes() - want.amplitudes()).camax() < 1e-14);
    }

    #[test]
    fn counting_rejects_non_unitary() {
        let model = qubit_model(presets::lowering(), PairKernel::zero(2), 2, ControlPolicy::constant(0.0).unwrap());
        let psi = Ket::basis(4, 0).unwrap();
        assert!(matches!(
            step_npart_counting_unitary(&psi, &model, 0.0, &[0, 0], 0.01),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn feedback_is_bounded_and_lipschitz_constant_reported() {
        let c = ControlPolicy::feedback(0.5, presets::pauli_z().scale(3.0)).unwrap();
        assert!((c.kappa() - 1.5).abs() < 1e-12);
        let g = Ket::basis(2, 0).unwrap().projector().unwrap();
        assert_eq!(c.evaluate(0.0, g.matrix()), 0.5);
        assert!(ControlPolicy::feedback(-1.0, presets::pauli_z()).is_err());
        assert!(ControlPolicy::feedback(1.0, presets::lowering()).is_err());
    }

    #[test]
    fn capacity_is_enforced() {
        let one = OneParticleModel::new(presets::pauli_z(), vec![presets::pauli_x()]).unwrap();
        let err = ManyBodyModel::new(one, presets::pauli_x(), PairKernel::zero(2), 15, ControlPolicy::constant(0.0).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn reduced_density_of_bell_state_is_maximally_mixed() {
        let model = qubit_model(presets::pauli_x(), PairKernel::zero(2), 2, ControlPolicy::constant(0.0).unwrap());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell = Ket::from_slice(&[C64::new(s, 0.0), ZERO, ZERO, C64::new(s, 0.0)]).unwrap();
        let g = reduced_density(&bell, &model, 1).unwrap();
        assert!((g.matrix() - CMatrix::identity(2, 2).scale(0.5)).camax() < 1e-15);
    }
}
