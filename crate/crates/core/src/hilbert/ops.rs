use crate::error::{Error, Result};
use crate::hilbert::types::{hermitian_defect, BoundedOp, CMatrix, DensityOp, Ket, PairKernel, C64, HERMITIAN_TOL, I, ZERO};

/// Hartree operator `A^η̄(x; x') = Σ_{y,y'} A(x,y; x',y') · conj(η(y,y'))`.
pub fn contract_kernel(kernel: &PairKernel, eta: &DensityOp) -> Result<BoundedOp> {
    let d = kernel.one_particle_dim();
    if eta.dim() != d {
        return Err(Error::Shape(format!(
            "kernel over d = {d} contracted with density of dim {}",
            eta.dim()
        )));
    }
    Ok(BoundedOp::from_matrix_unchecked(contract_matrix(kernel, eta.matrix())))
}

pub(crate) fn contract_matrix(kernel: &PairKernel, eta: &CMatrix) -> CMatrix {
    let d = kernel.one_particle_dim();
    let a = kernel.matrix();
    let mut out = CMatrix::zeros(d, d);
    for x in 0..d {
        for xp in 0..d {
            let mut acc = ZERO;
            for y in 0..d {
                for yp in 0..d {
                    acc += a[(x * d + y, xp * d + yp)] * eta[(y, yp)].conj();
                }
            }
            out[(x, xp)] = acc;
        }
    }
    out
}

/// `(v, L v) / (v, v)`.
pub fn expectation(op: &BoundedOp, v: &Ket) -> Result<C64> {
    if op.dim() != v.dim() {
        return Err(Error::Shape(format!(
            "operator of dim {} with ket of dim {}",
            op.dim(),
            v.dim()
        )));
    }
    let nn = v.norm_sqr();
    if nn == 0.0 {
        return Err(Error::UndefinedExpectation);
    }
    let value = v.amplitudes().dotc(&(op.matrix() * v.amplitudes())) / nn;
    debug_assert!(
        !op.is_hermitian(HERMITIAN_TOL) || value.im.abs() <= HERMITIAN_TOL * (1.0 + op.norm()),
        "Hermitian expectation with imaginary part {}",
        value.im
    );
    Ok(value)
}

/// `tr(L γ)`, the density-matrix counterpart of [`expectation`].
pub fn expectation_density(op: &CMatrix, gamma: &CMatrix) -> C64 {
    trace_of_product(op, gamma)
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// `(Re L, Im L) = ((L + L*)/2, (L − L*)/2i)`.
pub fn re_im_parts(op: &BoundedOp) -> (BoundedOp, BoundedOp) {
    let m = op.matrix();
    let adj = m.adjoint();
    let re = (m + &adj).scale(0.5);
    let im = (m - &adj) * (C64::new(0.5, 0.0) / I);
    (
        BoundedOp::from_matrix_unchecked(re),
        BoundedOp::from_matrix_unchecked(im),
    )
}

/// Sum of singular values.
pub fn trace_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.is_square() && hermitian_defect(m) == 0.0 {
        return m.clone().symmetric_eigenvalues().iter().map(|l| l.abs()).sum();
    }
    m.clone().singular_values().iter().sum()
}

/// `sqrt(Σ |m_ij|²)`.
pub fn hs_norm(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

pub fn anticommutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b + b * a
}
