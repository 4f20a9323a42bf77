use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Entrywise tolerance for Hermiticity and positivity checks.
pub const HERMITIAN_TOL: f64 = 1e-9;
/// Default tolerance on `| ‖v‖ − 1 |` for kets that claim to be normalized.
pub const DEFAULT_NORM_TOL: f64 = 1e-9;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

fn all_finite<'a>(it: impl IntoIterator<Item = &'a C64>) -> bool {
    it.into_iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub(crate) fn require_square(m: &CMatrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Largest entrywise deviation `|m_ij − conj(m_ji)|`.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Pure state amplitudes over a finite configuration space.
#[derive(Clone, Debug, PartialEq)]
pub struct Ket {
    amps: CVector,
}

impl Ket {
    pub fn new(amps: CVector) -> Result<Self> {
        if amps.is_empty() {
            return Err(Error::Shape("ket must have at least one amplitude".into()));
        }
        if !all_finite(amps.iter()) {
            return Err(Error::BlowUp { step: None });
        }
        Ok(Ket { amps })
    }

    pub fn from_slice(amps: &[C64]) -> Result<Self> {
        Ket::new(CVector::from_column_slice(amps))
    }

    pub(crate) fn from_vec_unchecked(amps: Vec<C64>) -> Self {
        Ket {
            amps: CVector::from_vec(amps),
        }
    }

    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::Shape(format!("basis index {index} out of range for dim {dim}")));
        }
        let mut amps = CVector::zeros(dim);
        amps[index] = ONE;
        Ok(Ket { amps })
    }

    /// Tensor product with factor 0 as the slowest-varying index.
    pub fn product(factors: &[Ket]) -> Result<Self> {
        let (first, rest) = factors
            .split_first()
            .ok_or_else(|| Error::Shape("empty product".into()))?;
        let mut acc = first.amps.as_slice().to_vec();
        for f in rest {
            let mut next = Vec::with_capacity(acc.len() * f.dim());
            for &a in &acc {
                next.extend(f.amps.iter().map(|&b| a * b));
            }
            acc = next;
        }
        Ok(Ket::from_vec_unchecked(acc))
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amps
    }

    pub fn as_slice(&self) -> &[C64] {
        self.amps.as_slice()
    }

    pub fn into_vector(self) -> CVector {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `(self, other)`, antilinear in the first slot.
    pub fn inner(&self, other: &Ket) -> C64 {
        self.amps.dotc(&other.amps)
    }

    pub fn normalized(&self) -> Result<Ket> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::UndefinedExpectation);
        }
        Ok(Ket {
            amps: self.amps.unscale(n),
        })
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        if self.is_normalized(tol) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "ket norm {} deviates from 1 by more than {tol:e}",
                self.norm()
            )))
        }
    }

    /// `|v⟩⟨v| / ⟨v|v⟩`.
    pub fn projector(&self) -> Result<DensityOp> {
        let v = self.normalized()?;
        Ok(DensityOp::from_matrix_unchecked(&v.amps * v.amps.adjoint()))
    }

    /// `|v⟩⟨v|` without normalization.
    pub fn outer(&self) -> CMatrix {
        &self.amps * self.amps.adjoint()
    }
}

/// Hermitian, positive semidefinite matrix; a state when its trace is one.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityOp {
    m: CMatrix,
}

impl DensityOp {
    /// Validates squareness, finiteness and Hermiticity. Positivity is checked
    /// by [`DensityOp::validate_state`] or [`DensityOp::min_eigenvalue`].
    pub fn new(m: CMatrix) -> Result<Self> {
        require_square(&m, "density operator")?;
        if !all_finite(m.iter()) {
            return Err(Error::BlowUp { step: None });
        }
        let defect = hermitian_defect(&m);
        if defect > HERMITIAN_TOL {
            return Err(Error::Invariant(format!(
                "density operator is not Hermitian (defect {defect:e})"
            )));
        }
        Ok(DensityOp { m })
    }

    /// Integrator inner loops use this; Hermiticity is asserted in debug builds.
    pub fn from_matrix_unchecked(m: CMatrix) -> Self {
        debug_assert!(m.nrows() == m.ncols());
        debug_assert!(
            hermitian_defect(&m) <= HERMITIAN_TOL * (1.0 + m.norm()),
            "non-Hermitian density"
        );
        DensityOp { m }
    }

    /// `I / d`.
    pub fn maximally_mixed(dim: usize) -> Self {
        DensityOp {
            m: CMatrix::identity(dim, dim).unscale(dim as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    pub fn purity(&self) -> f64 {
        // tr(ρ²) = Σ |ρ_ij|² for Hermitian ρ
        self.m.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self
            .m
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Full check: Hermitian, PSD (λ_min ≥ −1e-9) and unit trace.
    pub fn validate_state(&self) -> Result<()> {
        let defect = hermitian_defect(&self.m);
        if defect > HERMITIAN_TOL {
            return Err(Error::Invariant(format!("not Hermitian (defect {defect:e})")));
        }
        let lmin = self.min_eigenvalue();
        if lmin < -HERMITIAN_TOL {
            return Err(Error::Invariant(format!("not PSD (λ_min = {lmin:e})")));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > HERMITIAN_TOL {
            return Err(Error::Invariant(format!("trace {tr} is not 1")));
        }
        Ok(())
    }

    /// Divide by the trace.
    pub fn normalized(&self) -> Result<DensityOp> {
        let tr = self.trace();
        if tr.abs() < 1e-300 {
            return Err(Error::UndefinedExpectation);
        }
        Ok(DensityOp {
            m: self.m.unscale(tr),
        })
    }

    /// Re-symmetrize as `(m + m*)/2`.
    pub fn hermitize(&self) -> DensityOp {
        DensityOp {
            m: (&self.m + self.m.adjoint()).scale(0.5),
        }
    }
}

/// A bounded operator on a finite space with a lazily computed operator norm.
#[derive(Clone, Debug)]
pub struct BoundedOp {
    m: CMatrix,
    norm: OnceLock<f64>,
}

impl PartialEq for BoundedOp {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

impl BoundedOp {
    pub fn new(m: CMatrix) -> Result<Self> {
        require_square(&m, "operator")?;
        if !all_finite(m.iter()) {
            return Err(Error::BlowUp { step: None });
        }
        Ok(BoundedOp::from_matrix_unchecked(m))
    }

    pub(crate) fn from_matrix_unchecked(m: CMatrix) -> Self {
        BoundedOp {
            m,
            norm: OnceLock::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        BoundedOp::from_matrix_unchecked(CMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        BoundedOp::from_matrix_unchecked(CMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    /// Largest singular value.
    pub fn norm(&self) -> f64 {
        *self.norm.get_or_init(|| operator_norm(&self.m))
    }

    pub fn adjoint(&self) -> BoundedOp {
        BoundedOp::from_matrix_unchecked(self.m.adjoint())
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        hermitian_defect(&self.m) <= tol
    }

    pub fn is_zero(&self) -> bool {
        self.m.iter().all(|z| *z == ZERO)
    }

    /// Largest entry of `|L*L − I|`.
    pub fn unitarity_defect(&self) -> f64 {
        let d = self.dim();
        (self.m.adjoint() * &self.m - CMatrix::identity(d, d)).camax()
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_defect() <= tol
    }

    pub fn apply(&self, v: &Ket) -> Result<Ket> {
        if v.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "operator of dim {} applied to ket of dim {}",
                self.dim(),
                v.dim()
            )));
        }
        Ok(Ket {
            amps: &self.m * v.amplitudes(),
        })
    }

    pub fn scale(&self, s: f64) -> BoundedOp {
        BoundedOp::from_matrix_unchecked(self.m.scale(s))
    }

    /// `exp(i·angle·G)` for Hermitian `G`.
    pub fn unitary_exp(generator: &BoundedOp, angle: f64) -> Result<BoundedOp> {
        if !generator.is_hermitian(HERMITIAN_TOL) {
            return Err(Error::Invariant("unitary generator must be Hermitian".into()));
        }
        let eig = generator.m.clone().symmetric_eigen();
        let phases = CMatrix::from_diagonal(&CVector::from_iterator(
            generator.dim(),
            eig.eigenvalues.iter().map(|&l| C64::from_polar(1.0, angle * l)),
        ));
        let u = &eig.eigenvectors * phases * eig.eigenvectors.adjoint();
        Ok(BoundedOp::from_matrix_unchecked(u))
    }
}

pub(crate) fn operator_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Two-body kernel `A(x,y; x',y')` stored as a `d² × d²` matrix with row
/// `x·d + y` and column `x'·d + y'`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairKernel {
    d: usize,
    m: CMatrix,
    hs_norm: f64,
}

impl PairKernel {
    /// Validates Hermiticity on the pair space and swap symmetry.
    pub fn new(d: usize, m: CMatrix) -> Result<Self> {
        if d == 0 || m.nrows() != d * d || m.ncols() != d * d {
            return Err(Error::Shape(format!(
                "pair kernel for d = {d} must be {}x{}, got {}x{}",
                d * d,
                d * d,
                m.nrows(),
                m.ncols()
            )));
        }
        if !all_finite(m.iter()) {
            return Err(Error::BlowUp { step: None });
        }
        let defect = hermitian_defect(&m);
        if defect > HERMITIAN_TOL {
            return Err(Error::Invariant(format!("pair kernel is not Hermitian (defect {defect:e})")));
        }
        let swap = swap_defect(d, &m);
        if swap > HERMITIAN_TOL {
            return Err(Error::Invariant(format!("pair kernel is not swap-symmetric (defect {swap:e})")));
        }
        Ok(PairKernel::from_matrix_unchecked(d, m))
    }

    pub(crate) fn from_matrix_unchecked(d: usize, m: CMatrix) -> Self {
        let hs_norm = m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        PairKernel { d, m, hs_norm }
    }

    pub fn zero(d: usize) -> Self {
        PairKernel::from_matrix_unchecked(d, CMatrix::zeros(d * d, d * d))
    }

    /// Identity on the pair space.
    pub fn identity(d: usize) -> Self {
        PairKernel::from_matrix_unchecked(d, CMatrix::identity(d * d, d * d))
    }

    /// Symmetrized separable kernel `(S⊗T + T⊗S)/2` for Hermitian `S`, `T`.
    pub fn separable(s: &BoundedOp, t: &BoundedOp) -> Result<Self> {
        if s.dim() != t.dim() {
            return Err(Error::Shape("separable kernel factors differ in dimension".into()));
        }
        let st = s.matrix().kronecker(t.matrix());
        let ts = t.matrix().kronecker(s.matrix());
        PairKernel::new(s.dim(), (st + ts).scale(0.5))
    }

    pub fn one_particle_dim(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn hs_norm(&self) -> f64 {
        self.hs_norm
    }

    pub fn is_zero(&self) -> bool {
        self.hs_norm == 0.0
    }

    pub fn entry(&self, x: usize, y: usize, xp: usize, yp: usize) -> C64 {
        self.m[(x * self.d + y, xp * self.d + yp)]
    }

    pub fn scaled(&self, s: f64) -> PairKernel {
        PairKernel::from_matrix_unchecked(self.d, self.m.scale(s))
    }
}

/// Largest `|A(x,y;x',y') − A(y,x;y',x')|`.
pub fn swap_defect(d: usize, m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for x in 0..d {
        for y in 0..d {
            for xp in 0..d {
                for yp in 0..d {
                    let a = m[(x * d + y, xp * d + yp)];
                    let b = m[(y * d + x, yp * d + xp)];
                    worst = worst.max((a - b).norm());
                }
            }
        }
    }
    worst
}
