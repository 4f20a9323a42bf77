//! Measured quantities: the deviation functional `α`, the inequalities and
//! cancellations the convergence proof relies on, and the paired
//! N-particle vs limit experiment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::OneParticleModel;
use crate::hilbert::{
    lift_single_in, trace_norm, trace_of_product, BoundedOp, CMatrix, CVector, DensityOp, Ket, PairKernel, TensorLayout,
    C64, DEFAULT_NORM_TOL, HERMITIAN_TOL,
};
use crate::manybody::{step_npart_counting_unitary, step_npart_diffusive, ControlPolicy, ManyBodyModel, Variant};
use crate::meanfield::{step_limit_counting_unitary, step_limit_diffusive, LimitModel, MeanFieldCurve};
use crate::noise::{sample_unit_poisson, sample_wiener, SeedSpec, TimeGrid};
use crate::reduce::tree_map_reduce;

/// Slack for inequality checks, relative to the check's scale.
pub const CHECK_TOL: f64 = 1e-9;
const RANK_ONE_TOL: f64 = 1e-9;

/// `α_{N,j} = 1 − ⟨ψ_j| Γ^(j) |ψ_j⟩` for normalized `Ψ_N` and `ψ_j`.
pub fn alpha(psi_n: &Ket, psi_j: &Ket, layout: &TensorLayout, j: usize) -> Result<f64> {
    psi_n.check_normalized(DEFAULT_NORM_TOL)?;
    psi_j.check_normalized(DEFAULT_NORM_TOL)?;
    if psi_n.dim() != layout.total() || psi_j.dim() != layout.d() {
        return Err(Error::Shape("α needs a d^N state and a d-dimensional factor".into()));
    }
    layout.check_particle(j)?;
    let g = layout.reduced_density(psi_n.as_slice(), j);
    Ok(alpha_from_marginal(&g, psi_j))
}

/// `1 − ⟨ψ|Γ|ψ⟩` clipped to `[0, 1]`.
pub fn alpha_from_marginal(gamma_j: &CMatrix, psi: &Ket) -> f64 {
    let v = psi.amplitudes();
    let overlap = v.dotc(&(gamma_j * v)).re;
    (1.0 - overlap).clamp(0.0, 1.0)
}

fn rank_one(gamma: &DensityOp) -> Result<()> {
    let tr = gamma.trace();
    if (tr - 1.0).abs() > RANK_ONE_TOL || (gamma.purity() - 1.0).abs() > RANK_ONE_TOL {
        return Err(Error::Contract("expected a rank-one projector".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichOutcome {
    pub alpha: f64,
    pub trace_distance: f64,
    pub upper: f64,
    pub pass: bool,
}

/// `α ≤ tr|Γ − γ| ≤ 2√(2α)` with `α = tr((1 − γ)Γ)`.
pub fn knowles_pickl_check(big_gamma: &DensityOp, gamma: &DensityOp) -> Result<SandwichOutcome> {
    rank_one(gamma)?;
    if big_gamma.dim() != gamma.dim() {
        return Err(Error::Shape("densities of different dimension".into()));
    }
    let alpha = big_gamma.trace() - trace_of_product(gamma.matrix(), big_gamma.matrix()).re;
    let td = trace_norm(&(big_gamma.matrix() - gamma.matrix()));
    let upper = 2.0 * (2.0 * alpha.max(0.0)).sqrt();
    let pass = alpha <= td + CHECK_TOL && td <= upper + CHECK_TOL;
    Ok(SandwichOutcome {
        alpha,
        trace_distance: td,
        upper,
        pass,
    })
}

/// Constants entering the convergence-rate exponent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub a_hs: f64,
    pub kappa: f64,
    pub hhat_norm: f64,
    /// `Σ_l ‖L_l‖²`.
    pub l_norm_sqr: f64,
}

impl BoundConstants {
    pub fn of(a: &PairKernel, control: &ControlPolicy, hhat: &BoundedOp, one: &OneParticleModel) -> Self {
        BoundConstants {
            a_hs: a.hs_norm(),
            kappa: control.kappa(),
            hhat_norm: hhat.norm(),
            l_norm_sqr: one.coupling_norm_sqr(),
        }
    }

    /// `7‖A‖_HS + 6κ‖Ĥ‖ + 28‖L‖²`, the coupling term dropped for counting.
    pub fn rate(&self, variant: Variant) -> f64 {
        let base = 7.0 * self.a_hs + 6.0 * self.kappa * self.hhat_norm;
        match variant {
            Variant::Diffusive => base + 28.0 * self.l_norm_sqr,
            Variant::Counting => base,
        }
    }
}

/// `e^{Ct} α₀ + (e^{Ct} − 1)/√N`.
pub fn theorem_bound(t: f64, alpha0: f64, inv_sqrt_n: f64, constants: &BoundConstants, variant: Variant) -> f64 {
    let g = (constants.rate(variant) * t).exp();
    g * alpha0 + (g - 1.0) * inv_sqrt_n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaVariant {
    /// Hermitian `L`, bound `20‖L‖² α`.
    Hermitian,
    /// Arbitrary bounded `L`, bound `28‖L‖² α`.
    General,
}

impl LemmaVariant {
    pub fn constant(self) -> f64 {
        match self {
            LemmaVariant::Hermitian => 20.0,
            LemmaVariant::General => 28.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaOutcome {
    pub lhs_abs: f64,
    pub rhs: f64,
    pub scale: f64,
    pub pass: bool,
    pub variant: LemmaVariant,
}

fn tr(m: &CMatrix) -> C64 {
    m.trace()
}

/// Left-hand side of the Hermitian-coupling estimate.
pub fn lemma_lhs_hermitian(gamma: &CMatrix, big: &CMatrix, l: &CMatrix) -> C64 {
    let t1 = tr(&(l * gamma * l * big));
    let t2 = tr(&(big * (l * gamma + gamma * l)));
    let t3 = tr(&(big * l + gamma * l));
    let t4 = tr(&(big * gamma)) * tr(&(big * l)) * tr(&(gamma * l));
    t1 * -4.0 + t2 * t3 * 2.0 - t4 * 4.0
}

/// Left-hand side of the general-coupling estimate.
pub fn lemma_lhs_general(gamma: &CMatrix, big: &CMatrix, l: &CMatrix) -> C64 {
    let la = l.adjoint();
    let re2 = l + &la;
    let quartic = tr(&(gamma * l * big * &la)) + tr(&(gamma * &la * big * l)) + tr(&(gamma * &la * big * &la))
        + tr(&(gamma * l * big * l));
    let a = tr(&(gamma * big * &la + gamma * l * big)) * tr(&(gamma * &re2));
    let b = tr(&(gamma * big * l + gamma * &la * big)) * tr(&(big * &re2));
    let c = tr(&(big * gamma)) * tr(&(big * &re2)) * tr(&(gamma * &re2));
    -quartic + a + b - c
}

/// Checks `|lhs| ≤ K ‖L‖² tr((1 − γ)Γ)` with the variant's constant `K`.
pub fn lemma_a1_check(gamma: &DensityOp, big: &DensityOp, l: &BoundedOp, variant: LemmaVariant) -> Result<LemmaOutcome> {
    lemma_a1_check_with_constant(gamma, big, l, variant, variant.constant())
}

/// As [`lemma_a1_check`] with an arbitrary constant, for sharpness probes.
pub fn lemma_a1_check_with_constant(
    gamma: &DensityOp,
    big: &DensityOp,
    l: &BoundedOp,
    variant: LemmaVariant,
    constant: f64,
) -> Result<LemmaOutcome> {
    rank_one(gamma)?;
    if big.dim() != gamma.dim() || l.dim() != gamma.dim() {
        return Err(Error::Shape("γ, Γ and L must share a dimension".into()));
    }
    // the left-hand side is not homogeneous in Γ, so the trace must be one
    if (big.trace() - 1.0).abs() > RANK_ONE_TOL || big.min_eigenvalue() < -RANK_ONE_TOL {
        return Err(Error::Contract("Γ must be a unit-trace positive density".into()));
    }
    if variant == LemmaVariant::Hermitian && !l.is_hermitian(HERMITIAN_TOL) {
        return Err(Error::Contract("the Hermitian variant needs a Hermitian L".into()));
    }
    let lhs = match variant {
        LemmaVariant::Hermitian => lemma_lhs_hermitian(gamma.matrix(), big.matrix(), l.matrix()),
        LemmaVariant::General => lemma_lhs_general(gamma.matrix(), big.matrix(), l.matrix()),
    };
    let norm_sq = l.norm().powi(2);
    let alpha = (big.trace() - trace_of_product(gamma.matrix(), big.matrix()).re).max(0.0);
    let rhs = constant * norm_sq * alpha;
    let scale = norm_sq * big.trace().max(1.0);
    Ok(LemmaOutcome {
        lhs_abs: lhs.norm(),
        rhs,
        scale,
        pass: lhs.norm() <= rhs + CHECK_TOL * scale,
        variant,
    })
}

/// Unitary whose first column is `psi`; columns 1.. complete an orthonormal basis.
pub fn adapted_basis(psi: &Ket) -> Result<CMatrix> {
    let d = psi.dim();
    let first = psi.normalized()?.into_vector();
    let mut cols: Vec<CVector> = vec![first];
    for k in 0..d {
        if cols.len() == d {
            break;
        }
        let mut v = CVector::zeros(d);
        v[k] = C64::new(1.0, 0.0);
        for c in &cols {
            let p = c.dotc(&v);
            v -= c * p;
        }
        let n = v.norm();
        if n > 1e-6 {
            cols.push(v.unscale(n));
        }
    }
    Ok(CMatrix::from_columns(&cols))
}

/// The leading eigenvector of a rank-one projector.
fn projector_vector(gamma: &DensityOp) -> Result<Ket> {
    rank_one(gamma)?;
    let m = gamma.matrix();
    let col = (0..m.ncols())
        .max_by(|&a, &b| m[(a, a)].re.partial_cmp(&m[(b, b)].re).unwrap())
        .unwrap();
    Ket::new(m.column(col).into_owned())?.normalized()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityOutcome {
    pub alpha: f64,
    /// Largest `|Γ_jk| − α` over `j, k ≥ 1`.
    pub block_excess: f64,
    /// Largest `|Γ_j0| − √α` over `j ≥ 1`.
    pub column_excess: f64,
    /// Largest `|Γ_jk|² − Γ_jj Γ_kk`.
    pub minor_excess: f64,
    pub pass: bool,
}

/// Entry bounds of `Γ` in the basis where `γ` projects onto the first vector.
pub fn entrywise_positivity_check(big: &DensityOp, gamma: &DensityOp) -> Result<PositivityOutcome> {
    let psi = projector_vector(gamma)?;
    let u = adapted_basis(&psi)?;
    let g = u.adjoint() * big.matrix() * &u;
    let d = g.nrows();
    let alpha = (big.trace() - g[(0, 0)].re).max(0.0);
    let (mut block, mut column, mut minor) = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for j in 0..d {
        for k in 0..d {
            let a = g[(j, k)].norm();
            minor = minor.max(a * a - g[(j, j)].re * g[(k, k)].re);
            if j >= 1 && k >= 1 {
                block = block.max(a - alpha);
            } else if j >= 1 && k == 0 {
                column = column.max(a - alpha.sqrt());
            }
        }
    }
    let tol = CHECK_TOL * big.trace().max(1.0);
    Ok(PositivityOutcome {
        alpha,
        block_excess: block,
        column_excess: column,
        minor_excess: minor,
        pass: block <= tol && column <= tol && minor <= tol,
    })
}

fn lift_gamma(layout: &TensorLayout, gamma: &DensityOp, j: usize) -> Result<CMatrix> {
    Ok(lift_single_in(layout, &BoundedOp::new(gamma.matrix().clone())?, j)?.into_matrix())
}

fn check_n_body(big: &DensityOp, gamma: &DensityOp, l: &BoundedOp, layout: &TensorLayout, j: usize) -> Result<()> {
    if big.dim() != layout.total() || gamma.dim() != layout.d() || l.dim() != layout.d() {
        return Err(Error::Shape("N-body density, factor and coupling dimensions disagree".into()));
    }
    layout.check_particle(j)
}

/// Largest deviation among the cyclic identities that make the `k ≠ j`
/// terms drop out: `tr(L_k*L_k Γ γ_j) = tr(Γ L_k*L_k γ_j) = tr(L_k Γ L_k* γ_j) = tr(Γ γ_j L_k*L_k)`.
pub fn offparticle_cancellation_check(
    big: &DensityOp,
    gamma_j: &DensityOp,
    l: &BoundedOp,
    layout: &TensorLayout,
    j: usize,
    k: usize,
) -> Result<f64> {
    check_n_body(big, gamma_j, l, layout, j)?;
    layout.check_particle(k)?;
    if j == k {
        return Err(Error::Contract("the off-particle identity needs k ≠ j".into()));
    }
    let lk = lift_single_in(layout, l, k)?.into_matrix();
    let lk_adj = lk.adjoint();
    let lkl = &lk_adj * &lk;
    let g = lift_gamma(layout, gamma_j, j)?;
    let m = big.matrix();
    let a = tr(&(&lkl * m * &g));
    let values = [tr(&(m * &lkl * &g)), tr(&(&lk * m * &lk_adj * &g)), tr(&(m * &g * &lkl))];
    Ok(values.iter().map(|v| (v - a).norm()).fold(0.0, f64::max))
}

/// The `dt` coefficient of `d tr(Γ γ_j)` contributed by counting channel `j`:
/// `tr[(½{L*L,Γ} − LΓL*)γ] + tr[Γ(½{L*L,γ} − LγL*)] − tr[(LγL* − γ)(LΓL* − Γ)]`
/// with `L` and `γ` acting on factor `j`. It vanishes for unitary `L`.
pub fn counting_dt_cancellation_check(
    big: &DensityOp,
    gamma_j: &DensityOp,
    l: &BoundedOp,
    layout: &TensorLayout,
    j: usize,
) -> Result<f64> {
    let defect = l.unitarity_defect();
    if defect > HERMITIAN_TOL {
        return Err(Error::Contract(format!("coupling is not unitary (defect {defect:e})")));
    }
    counting_dt_residual(big, gamma_j, l, layout, j)
}

/// The same expression without the unitarity precondition.
pub fn counting_dt_residual(big: &DensityOp, gamma_j: &DensityOp, l: &BoundedOp, layout: &TensorLayout, j: usize) -> Result<f64> {
    check_n_body(big, gamma_j, l, layout, j)?;
    let lj = lift_single_in(layout, l, j)?.into_matrix();
    let la = lj.adjoint();
    let ll = &la * &lj;
    let g = lift_gamma(layout, gamma_j, j)?;
    let m = big.matrix();
    let lml = &lj * m * &la;
    let lgl = &lj * &g * &la;
    let first = tr(&(((&ll * m + m * &ll).scale(0.5) - &lml) * &g));
    let second = tr(&(m * ((&ll * &g + &g * &ll).scale(0.5) - &lgl)));
    let third = tr(&((&lgl - &g) * (&lml - m)));
    Ok((first + second - third).norm())
}

/// `‖L‖² max(1, tr Γ)`, the scale residuals are compared against.
pub fn residual_scale(l: &BoundedOp, big: &DensityOp) -> f64 {
    l.norm().powi(2) * big.trace().max(1.0)
}

/// Inputs of a paired N-particle vs limit experiment.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub one: OneParticleModel,
    pub hhat: BoundedOp,
    pub a: PairKernel,
    pub control: ControlPolicy,
    pub variant: Variant,
    pub n_list: Vec<usize>,
    pub trajectories: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// One-particle initial state; the N-particle state is its N-fold product.
    pub psi0: Ket,
    pub renormalize: bool,
    /// Multiplies the theoretical bound; 1 except in negative controls.
    pub bound_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub n: usize,
    pub trajectories: usize,
    pub variant: Variant,
    pub times: Vec<f64>,
    pub alpha_mean: Vec<f64>,
    pub alpha_ci95: Vec<f64>,
    pub bound: Vec<f64>,
    pub pass: Vec<bool>,
    pub constants: BoundConstants,
    pub rate: f64,
}

impl ConvergenceReport {
    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }

    pub fn final_alpha(&self) -> (f64, f64) {
        (*self.alpha_mean.last().unwrap(), *self.alpha_ci95.last().unwrap())
    }
}

/// Rows `t,N,alpha_mean,alpha_ci95,bound,pass` for every report in order.
pub fn reports_to_csv(reports: &[ConvergenceReport]) -> String {
    let mut out = String::from("t,N,alpha_mean,alpha_ci95,bound,pass\n");
    for r in reports {
        for i in 0..r.times.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.times[i], r.n, r.alpha_mean[i], r.alpha_ci95[i], r.bound[i], r.pass[i]
            );
        }
    }
    out
}

/// Whether `E α_N(T)` decreases from each `N` to the next by more than the
/// two confidence half-widths combined.
pub fn decreasing_in_n(reports: &[ConvergenceReport]) -> bool {
    reports.windows(2).all(|w| {
        let (a, ca) = w[0].final_alpha();
        let (b, cb) = w[1].final_alpha();
        a - b > ca + cb
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub n: usize,
    pub trajectories: usize,
    pub alpha_final: f64,
    pub alpha_ci95_final: f64,
    pub bound_final: f64,
    pub max_alpha_over_bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub variant: Variant,
    pub constants: BoundConstants,
    pub rate: f64,
    pub entries: Vec<SummaryEntry>,
    pub decreasing_in_n: bool,
    pub all_pass: bool,
}

pub fn summarize(reports: &[ConvergenceReport]) -> Option<ConvergenceSummary> {
    let first = reports.first()?;
    let entries: Vec<SummaryEntry> = reports
        .iter()
        .map(|r| {
            let (a, c) = r.final_alpha();
            let ratio = r
                .alpha_mean
                .iter()
                .zip(&r.bound)
                .filter(|(_, &b)| b > 0.0)
                .map(|(a, b)| a / b)
                .fold(0.0, f64::max);
            SummaryEntry {
                n: r.n,
                trajectories: r.trajectories,
                alpha_final: a,
                alpha_ci95_final: c,
                bound_final: *r.bound.last().unwrap(),
                max_alpha_over_bound: ratio,
                pass: r.all_pass(),
            }
        })
        .collect();
    Some(ConvergenceSummary {
        variant: first.variant,
        constants: first.constants,
        rate: first.rate,
        all_pass: entries.iter().all(|e| e.pass),
        entries,
        decreasing_in_n: decreasing_in_n(reports),
    })
}

struct AlphaSums {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// One paired trajectory: the N-particle state and N limit states on shared
/// noise. Returns the particle-averaged `α_N(t)` at every grid point.
fn paired_trajectory(spec: &ExperimentSpec, model: &ManyBodyModel, limit: &LimitModel, eta: &MeanFieldCurve, r: usize) -> Result<Vec<f64>> {
    let n = model.n();
    let grid = &spec.grid;
    let channels = spec.one.channel_count();
    let seed = SeedSpec::new(spec.seed, ((n as u64) << 32) | r as u64);
    let noise = match spec.variant {
        Variant::Diffusive => sample_wiener(grid, n * channels, seed)?,
        Variant::Counting => sample_unit_poisson(grid, n * channels, seed)?,
    };
    let mut psi_n = Ket::product(&vec![spec.psi0.clone(); n])?;
    let mut limits = vec![spec.psi0.clone(); n];
    let layout = model.layout();
    let measure = |psi_n: &Ket, limits: &[Ket]| -> Result<f64> {
        let big = psi_n.normalized()?;
        let mut acc = 0.0;
        for (j, psi) in limits.iter().enumerate() {
            acc += alpha(&big, &psi.normalized()?, layout, j)?;
        }
        Ok(acc / n as f64)
    };
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(measure(&psi_n, &limits)?);
    for step in 0..grid.steps() {
        let t = grid.time(step);
        let dt = grid.dt();
        let eta_t = eta.at(step);
        match spec.variant {
            Variant::Diffusive => {
                let db = noise.dw(step);
                psi_n = step_npart_diffusive(&psi_n, model, t, db, dt)?;
                for (j, psi) in limits.iter_mut().enumerate() {
                    let u = spec.control.evaluate(t, &psi.outer().unscale(psi.norm_sqr()));
                    *psi = step_limit_diffusive(psi, limit, eta_t, u, &db[j * channels..(j + 1) * channels], dt)?;
                }
            }
            Variant::Counting => {
                let jumps = noise.jumps(step);
                psi_n = step_npart_counting_unitary(&psi_n, model, t, jumps, dt)?;
                for (j, psi) in limits.iter_mut().enumerate() {
                    let u = spec.control.evaluate(t, &psi.outer().unscale(psi.norm_sqr()));
                    *psi = step_limit_counting_unitary(psi, limit, eta_t, u, &jumps[j * channels..(j + 1) * channels], dt)?;
                }
            }
        }
        if spec.renormalize {
            psi_n = psi_n.normalized()?;
            for psi in limits.iter_mut() {
                *psi = psi.normalized()?;
            }
        }
        out.push(measure(&psi_n, &limits)?);
    }
    Ok(out)
}

/// Runs the paired experiment for every `N` against a frozen curve `eta`.
pub fn convergence_experiment(spec: &ExperimentSpec, eta: &MeanFieldCurve) -> Result<Vec<ConvergenceReport>> {
    if spec.trajectories < 2 {
        return Err(Error::Invariant("at least two trajectories are needed for a confidence interval".into()));
    }
    if eta.grid().steps() != spec.grid.steps() || eta.dim() != spec.one.dim() {
        return Err(Error::Shape("mean-field curve does not match the experiment grid or dimension".into()));
    }
    spec.psi0.check_normalized(DEFAULT_NORM_TOL)?;
    if spec.variant == Variant::Counting && !spec.one.all_unitary(HERMITIAN_TOL) {
        return Err(Error::Contract("counting experiments need unitary couplings".into()));
    }
    let limit = LimitModel::new(spec.one.clone(), spec.hhat.clone(), spec.a.clone(), spec.control.clone())?;
    let constants = BoundConstants::of(&spec.a, &spec.control, &spec.hhat, &spec.one);
    let rate = constants.rate(spec.variant);
    let mut reports = Vec::with_capacity(spec.n_list.len());
    for &n in &spec.n_list {
        let model = ManyBodyModel::new(spec.one.clone(), spec.hhat.clone(), spec.a.clone(), n, spec.control.clone())?;
        let runs: Vec<Result<Vec<f64>>> =
            crate::reduce::ordered_map(spec.trajectories, |r| paired_trajectory(spec, &model, &limit, eta, r));
        let runs: Vec<Vec<f64>> = runs.into_iter().collect::<Result<_>>()?;
        let sums = tree_map_reduce(
            spec.trajectories,
            |r| AlphaSums {
                sum: runs[r].clone(),
                sum_sq: runs[r].iter().map(|a| a * a).collect(),
            },
            |mut a, b| {
                a.sum.iter_mut().zip(&b.sum).for_each(|(x, y)| *x += y);
                a.sum_sq.iter_mut().zip(&b.sum_sq).for_each(|(x, y)| *x += y);
                a
            },
        )
        .expect("at least two trajectories");
        let m = spec.trajectories as f64;
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();
        let times: Vec<f64> = (0..=spec.grid.steps()).map(|k| spec.grid.time(k)).collect();
        let alpha_mean: Vec<f64> = sums.sum.iter().map(|s| s / m).collect();
        let alpha_ci95: Vec<f64> = sums
            .sum_sq
            .iter()
            .zip(&alpha_mean)
            .map(|(sq, mean)| {
                let var = ((sq / m - mean * mean) * m / (m - 1.0)).max(0.0);
                1.96 * (var / m).sqrt()
            })
            .collect();
        // product initial data
        let bound: Vec<f64> = times
            .iter()
            .map(|&t| spec.bound_scale * theorem_bound(t, 0.0, inv_sqrt_n, &constants, spec.variant))
            .collect();
        let pass = (0..times.len()).map(|k| alpha_mean[k] <= bound[k] + alpha_ci95[k]).collect();
        reports.push(ConvergenceReport {
            n,
            trajectories: spec.trajectories,
            variant: spec.variant,
            times,
            alpha_mean,
            alpha_ci95,
            bound,
            pass,
            constants,
            rate,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{presets, random};

    #[test]
    fn alpha_of_product_and_orthogonal_states() {
        let layout = TensorLayout::new(2, 3).unwrap();
        let mut rng = random::rng(1);
        let f: Vec<Ket> = (0..3).map(|_| random::ket(&mut rng, 2)).collect();
        let psi = Ket::product(&f).unwrap();
        assert!(alpha(&psi, &f[1], &layout, 1).unwrap() < 1e-14);
        let e0 = Ket::basis(2, 0).unwrap();
        let e1 = Ket::basis(2, 1).unwrap();
        let psi = Ket::product(&[e0.clone(), e1.clone(), e0.clone()]).unwrap();
        assert!((alpha(&psi, &e0, &layout, 1).unwrap() - 1.0).abs() < 1e-15);
        let unnormalized = Ket::from_slice(&[C64::new(2.0, 0.0), C64::new(0.0, 0.0)]).unwrap();
        assert!(matches!(alpha(&psi, &unnormalized, &layout, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn sandwich_closed_forms() {
        let g = Ket::basis(3, 0).unwrap().projector().unwrap();
        let same = knowles_pickl_check(&g, &g).unwrap();
        assert_eq!((same.alpha, same.trace_distance, same.upper), (0.0, 0.0, 0.0));
        assert!(same.pass);
        let orth = Ket::basis(3, 2).unwrap().projector().unwrap();
        let o = knowles_pickl_check(&orth, &g).unwrap();
        assert!((o.alpha - 1.0).abs() < 1e-15 && (o.trace_distance - 2.0).abs() < 1e-12);
        assert!((o.upper - 2.0 * 2f64.sqrt()).abs() < 1e-12 && o.pass);
        assert!(knowles_pickl_check(&g, &DensityOp::maximally_mixed(3)).is_err());
    }

    #[test]
    fn bound_formula_identities() {
        let c = BoundConstants {
            a_hs: 1.0,
            kappa: 0.5,
            hhat_norm: 1.0,
            l_norm_sqr: 2.0,
        };
        assert_eq!(theorem_bound(0.0, 0.3, 0.5, &c, Variant::Diffusive), 0.3);
        let rate = c.rate(Variant::Diffusive);
        let t = 2f64.ln() / rate;
        assert!((theorem_bound(t, 0.0, 0.25, &c, Variant::Diffusive) - 0.25).abs() < 1e-12);
        let no_l = BoundConstants { l_norm_sqr: 0.0, ..c };
        assert_eq!(
            theorem_bound(0.7, 0.1, 0.3, &c, Variant::Counting),
            theorem_bound(0.7, 0.1, 0.3, &no_l, Variant::Diffusive)
        );
    }

    #[test]
    fn lemma_trivial_cases() {
        let mut rng = random::rng(2);
        let g = random::projector(&mut rng, 4);
        let big = random::density(&mut rng, 4, 4);
        let id = BoundedOp::identity(4);
        let h = lemma_a1_check(&g, &big, &id, LemmaVariant::Hermitian).unwrap();
        assert!(h.lhs_abs < 1e-14 && h.pass);
        let k = random::anti_hermitian(&mut rng, 4, 1.3);
        let a = lemma_a1_check(&g, &big, &k, LemmaVariant::General).unwrap();
        assert!(a.lhs_abs < 1e-13, "{}", a.lhs_abs);
        assert!(lemma_a1_check(&g, &big, &k, LemmaVariant::Hermitian).is_err());
    }

    #[test]
    fn general_form_reduces_to_hermitian_form() {
        let mut rng = random::rng(3);
        for _ in 0..20 {
            let g = random::projector(&mut rng, 3);
            let big = random::density(&mut rng, 3, 2);
            let l = random::hermitian(&mut rng, 3, 1.0);
            let a = lemma_lhs_hermitian(g.matrix(), big.matrix(), l.matrix());
            let b = lemma_lhs_general(g.matrix(), big.matrix(), l.matrix());
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn lemma_rejects_subnormalized_big_gamma() {
        let g = Ket::basis(2, 0).unwrap().projector().unwrap();
        let half = DensityOp::from_matrix_unchecked(DensityOp::maximally_mixed(2).matrix().scale(0.5));
        assert!(matches!(
            lemma_a1_check(&g, &half, &presets::pauli_x(), LemmaVariant::Hermitian),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lemma_vanishes_at_gamma_equal_big_gamma() {
        let mut rng = random::rng(4);
        let g = random::projector(&mut rng, 5);
        let l = random::bounded(&mut rng, 5, 2.0);
        let o = lemma_a1_check(&g, &g, &l, LemmaVariant::General).unwrap();
        assert!(o.lhs_abs < 1e-12 && o.pass);
    }

    #[test]
    fn adapted_basis_is_unitary_with_given_first_column() {
        let psi = random::ket(&mut random::rng(5), 4);
        let u = adapted_basis(&psi).unwrap();
        assert!((u.adjoint() * &u - CMatrix::identity(4, 4)).camax() < 1e-13);
        assert!((u.column(0) - psi.amplitudes()).camax() < 1e-14);
    }

    #[test]
    fn positivity_closed_forms() {
        let g = Ket::basis(2, 0).unwrap().projector().unwrap();
        let same = entrywise_positivity_check(&g, &g).unwrap();
        assert!(same.alpha.abs() < 1e-15 && same.pass);
        let mixed = entrywise_positivity_check(&DensityOp::maximally_mixed(2), &g).unwrap();
        assert!((mixed.alpha - 0.5).abs() < 1e-15 && mixed.pass);
    }

    #[test]
    fn cancellations_on_product_and_entangled_states() {
        let layout = TensorLayout::new(2, 2).unwrap();
        let mut rng = random::rng(6);
        let l = random::bounded(&mut rng, 2, 1.0);
        let g = random::projector(&mut rng, 2);
        for _ in 0..10 {
            let big = random::density(&mut rng, 4, 2);
            let r = offparticle_cancellation_check(&big, &g, &l, &layout, 0, 1).unwrap();
            assert!(r < 1e-13, "{r}");
        }
        let u = BoundedOp::unitary_exp(&presets::pauli_x(), 0.7).unwrap();
        let big = random::density(&mut rng, 4, 3);
        assert!(counting_dt_cancellation_check(&big, &g, &u, &layout, 1).unwrap() < 1e-14);
        assert!(counting_dt_cancellation_check(&big, &g, &BoundedOp::identity(2), &layout, 0).unwrap() == 0.0);
        assert!(counting_dt_cancellation_check(&big, &g, &l, &layout, 0).is_err());
        let scaled = BoundedOp::identity(2).scale(1.5);
        assert!(counting_dt_residual(&big, &g, &scaled, &layout, 0).unwrap() > 1e-3);
    }

    #[test]
    fn decoupled_unitary_experiment_has_zero_alpha() {
        let one = OneParticleModel::new(presets::pauli_z(), vec![BoundedOp::zeros(2)]).unwrap();
        let grid = TimeGrid::new(0.1, 1e-2).unwrap();
        let spec = ExperimentSpec {
            one,
            hhat: presets::pauli_x(),
            a: PairKernel::zero(2),
            control: ControlPolicy::constant(0.2).unwrap(),
            variant: Variant::Diffusive,
            n_list: vec![2, 3],
            trajectories: 4,
            grid,
            seed: 1,
            psi0: random::ket(&mut random::rng(7), 2),
            renormalize: true,
            bound_scale: 1.0,
        };
        let eta = MeanFieldCurve::constant(grid, spec.psi0.projector().unwrap());
        let reports = convergence_experiment(&spec, &eta).unwrap();
        for r in &reports {
            // Euler on a product differs from the product of Euler steps at O(dt²)
            assert!(r.alpha_mean.iter().all(|&a| a < 1e-5), "{:?}", r.alpha_mean);
            // every rate constant vanishes here, so the bound is identically 0
            assert!(r.bound.iter().all(|&b| b == 0.0));
        }
        let csv = reports_to_csv(&reports);
        assert!(csv.starts_with("t,N,alpha_mean,alpha_ci95,bound,pass\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * (grid.steps() + 1));
    }
}
