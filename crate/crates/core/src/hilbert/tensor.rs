//! Index arithmetic for `N`-fold tensor products of a `d`-dimensional space.
//!
//! Factor ordering: particle `0` is the slowest-varying digit, so a basis
//! index is `Σ_j x_j · d^(N−1−j)` and `lift_single(O, 1, 2) = I ⊗ O`. Every
//! routine that touches many-body indices goes through [`TensorLayout`].

use crate::error::{Error, Result};
use crate::hilbert::types::{BoundedOp, CMatrix, DensityOp, Ket, PairKernel, C64, ZERO};

/// Default cap on `d^N`.
pub const DEFAULT_MAX_STATE_DIM: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorLayout {
    d: usize,
    n: usize,
    total: usize,
}

impl TensorLayout {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        TensorLayout::with_capacity(d, n, DEFAULT_MAX_STATE_DIM)
    }

    pub fn with_capacity(d: usize, n: usize, max_dim: usize) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::Shape(format!("layout needs d ≥ 1 and N ≥ 1, got d = {d}, N = {n}")));
        }
        let required = (d as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
        if required > max_dim as u128 {
            return Err(Error::Capacity { required, max: max_dim });
        }
        Ok(TensorLayout {
            d,
            n,
            total: required as usize,
        })
    }

    /// Infer `N` from a total dimension that must be an exact power of `d`.
    pub fn from_total(d: usize, total: usize) -> Result<Self> {
        if d < 2 {
            if d == 1 && total == 1 {
                return TensorLayout::new(1, 1);
            }
            return Err(Error::Shape(format!("cannot factor dim {total} over d = {d}")));
        }
        let mut n = 0;
        let mut acc = 1usize;
        while acc < total {
            acc = acc.saturating_mul(d);
            n += 1;
        }
        if acc != total || n == 0 {
            return Err(Error::Shape(format!("dimension {total} is not a power of {d}")));
        }
        TensorLayout::with_capacity(d, n, total.max(DEFAULT_MAX_STATE_DIM))
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Distance in the flat index between consecutive values of particle `j`.
    pub fn stride(&self, j: usize) -> usize {
        self.d.pow((self.n - 1 - j) as u32)
    }

    pub fn digit(&self, index: usize, j: usize) -> usize {
        (index / self.stride(j)) % self.d
    }

    pub fn check_particle(&self, j: usize) -> Result<()> {
        if j >= self.n {
            return Err(Error::Shape(format!("particle index {j} out of range for N = {}", self.n)));
        }
        Ok(())
    }

    fn check_op(&self, op_dim: usize) -> Result<()> {
        if op_dim != self.d {
            return Err(Error::Shape(format!(
                "one-particle operator of dim {op_dim} does not match d = {}",
                self.d
            )));
        }
        Ok(())
    }

    /// `out += coeff · O_j · input` where `op` is row-major `d × d`.
    pub fn apply_single_into(&self, op: &[C64], j: usize, coeff: C64, input: &[C64], out: &mut [C64]) {
        let d = self.d;
        let s = self.stride(j);
        let block = s * d;
        for outer in (0..self.total).step_by(block) {
            for inner in 0..s {
                let base = outer + inner;
                for a in 0..d {
                    let v = input[base + a * s];
                    if v == ZERO {
                        continue;
                    }
                    let cv = coeff * v;
                    for b in 0..d {
                        out[base + b * s] += op[b * d + a] * cv;
                    }
                }
            }
        }
    }

    /// `out += coeff · A_{ij} · input`, `i < j`, `kernel` row-major `d² × d²`.
    pub fn apply_pair_into(
        &self,
        kernel: &[C64],
        i: usize,
        j: usize,
        coeff: C64,
        input: &[C64],
        out: &mut [C64],
    ) {
        let d = self.d;
        let dd = d * d;
        let si = self.stride(i);
        let sj = self.stride(j);
        let mut local = vec![ZERO; dd];
        for idx in 0..self.total {
            let xi = self.digit(idx, i);
            let xj = self.digit(idx, j);
            if xi != 0 || xj != 0 {
                continue;
            }
            // idx enumerates the base of each (i, j) fibre exactly once
            for x in 0..d {
                for y in 0..d {
                    local[x * d + y] = input[idx + x * si + y * sj];
                }
            }
            for r in 0..dd {
                let mut acc = ZERO;
                let row = &kernel[r * dd..(r + 1) * dd];
                for (k, v) in local.iter().enumerate() {
                    acc += row[k] * v;
                }
                if acc != ZERO {
                    let (x, y) = (r / d, r % d);
                    out[idx + x * si + y * sj] += coeff * acc;
                }
            }
        }
    }

    /// `tr_{all but j} |Ψ⟩⟨Ψ|` directly from amplitudes.
    pub fn reduced_density(&self, psi: &[C64], j: usize) -> CMatrix {
        let d = self.d;
        let s = self.stride(j);
        let block = s * d;
        let mut out = CMatrix::zeros(d, d);
        for outer in (0..self.total).step_by(block) {
            for inner in 0..s {
                let base = outer + inner;
                for a in 0..d {
                    let pa = psi[base + a * s];
                    for b in 0..d {
                        out[(a, b)] += pa * psi[base + b * s].conj();
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn row_major(m: &CMatrix) -> Vec<C64> {
    let mut v = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            v.push(m[(r, c)]);
        }
    }
    v
}

/// `I^{⊗j} ⊗ O ⊗ I^{⊗(N−1−j)}`, particle index `j` in `0..n`.
pub fn lift_single(op: &BoundedOp, j: usize, n: usize) -> Result<BoundedOp> {
    let layout = TensorLayout::new(op.dim(), n)?;
    lift_single_in(&layout, op, j)
}

pub fn lift_single_in(layout: &TensorLayout, op: &BoundedOp, j: usize) -> Result<BoundedOp> {
    layout.check_op(op.dim())?;
    layout.check_particle(j)?;
    let flat = row_major(op.matrix());
    Ok(BoundedOp::from_matrix_unchecked(materialize(layout, |input, out| {
        layout.apply_single_into(&flat, j, C64::new(1.0, 0.0), input, out)
    })))
}

/// `A` acting on particles `(i, j)`, `i < j`, identity elsewhere.
pub fn lift_pair(kernel: &PairKernel, i: usize, j: usize, n: usize) -> Result<BoundedOp> {
    let layout = TensorLayout::new(kernel.one_particle_dim(), n)?;
    lift_pair_in(&layout, kernel, i, j)
}

pub fn lift_pair_in(layout: &TensorLayout, kernel: &PairKernel, i: usize, j: usize) -> Result<BoundedOp> {
    layout.check_op(kernel.one_particle_dim())?;
    layout.check_particle(j)?;
    if i >= j {
        return Err(Error::Shape(format!("pair indices must satisfy i < j, got ({i}, {j})")));
    }
    let flat = row_major(kernel.matrix());
    Ok(BoundedOp::from_matrix_unchecked(materialize(layout, |input, out| {
        layout.apply_pair_into(&flat, i, j, C64::new(1.0, 0.0), input, out)
    })))
}

fn materialize(layout: &TensorLayout, mut apply: impl FnMut(&[C64], &mut [C64])) -> CMatrix {
    let n = layout.total();
    let mut m = CMatrix::zeros(n, n);
    let mut e = vec![ZERO; n];
    let mut col = vec![ZERO; n];
    for c in 0..n {
        e[c] = C64::new(1.0, 0.0);
        col.iter_mut().for_each(|z| *z = ZERO);
        apply(&e, &mut col);
        for (r, v) in col.iter().enumerate() {
            m[(r, c)] = *v;
        }
        e[c] = ZERO;
    }
    m
}

/// Reduced density of particle `j` (in `0..n`) of an `N`-body density matrix.
pub fn partial_trace(g: &DensityOp, d: usize, j: usize, n: usize) -> Result<DensityOp> {
    let layout = TensorLayout::new(d, n)?;
    if g.dim() != layout.total() {
        return Err(Error::Shape(format!(
            "density of dim {} is not {d}^{n} = {}",
            g.dim(),
            layout.total()
        )));
    }
    layout.check_particle(j)?;
    let s = layout.stride(j);
    let block = s * d;
    let m = g.matrix();
    let mut out = CMatrix::zeros(d, d);
    for outer in (0..layout.total()).step_by(block) {
        for inner in 0..s {
            let base = outer + inner;
            for a in 0..d {
                for b in 0..d {
                    out[(a, b)] += m[(base + a * s, base + b * s)];
                }
            }
        }
    }
    Ok(DensityOp::from_matrix_unchecked(out))
}

/// Reduced density of a pure `N`-body state without materializing `|Ψ⟩⟨Ψ|`.
pub fn reduced_density(psi: &Ket, layout: &TensorLayout, j: usize) -> Result<DensityOp> {
    if psi.dim() != layout.total() {
        return Err(Error::Shape(format!(
            "ket of dim {} does not match layout dim {}",
            psi.dim(),
            layout.total()
        )));
    }
    layout.check_particle(j)?;
    Ok(DensityOp::from_matrix_unchecked(layout.reduced_density(psi.as_slice(), j)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::presets;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn lift_with_one_particle_is_identity_map() {
        let o = presets::pauli_y();
        assert_eq!(lift_single(&o, 0, 1).unwrap(), o);
    }

    #[test]
    fn lift_second_of_two_matches_hand_unrolled_kron() {
        let lifted = lift_single(&presets::pauli_x(), 1, 2).unwrap();
        // I ⊗ σx
        #[rustfmt::skip]
        let expected = CMatrix::from_row_slice(4, 4, &[
            c(0.), c(1.), c(0.), c(0.),
            c(1.), c(0.), c(0.), c(0.),
            c(0.), c(0.), c(0.), c(1.),
            c(0.), c(0.), c(1.), c(0.),
        ]);
        assert_eq!(lifted.matrix(), &expected);
    }

    #[test]
    fn capacity_is_enforced() {
        let err = TensorLayout::new(2, 15).unwrap_err();
        assert!(matches!(err, Error::Capacity { required: 32768, max: 16384 }));
        assert!(TensorLayout::with_capacity(2, 15, 1 << 15).is_ok());
        assert!(matches!(
            lift_single(&presets::pauli_x(), 0, 20),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn bad_indices_are_shape_errors() {
        assert!(matches!(lift_single(&presets::pauli_x(), 2, 2), Err(Error::Shape(_))));
        let a = PairKernel::identity(2);
        assert!(matches!(lift_pair(&a, 1, 1, 3), Err(Error::Shape(_))));
        assert!(matches!(lift_pair(&a, 2, 1, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn partial_trace_rejects_non_power_dimension() {
        let g = DensityOp::maximally_mixed(6);
        assert!(matches!(partial_trace(&g, 2, 0, 3), Err(Error::Shape(_))));
        assert!(TensorLayout::from_total(2, 6).is_err());
        assert_eq!(TensorLayout::from_total(3, 27).unwrap().n(), 3);
    }

    #[test]
    fn lift_pair_of_first_two_is_kernel_itself() {
        let a = crate::hilbert::random::pair_kernel(&mut crate::hilbert::random::rng(3), 2, 1.0);
        let lifted = lift_pair(&a, 0, 1, 2).unwrap();
        assert!((lifted.matrix() - a.matrix()).camax() < 1e-15);
    }

    #[test]
    fn reduced_density_of_bell_state_is_maximally_mixed() {
        let s = 1.0 / 2f64.sqrt();
        let bell = Ket::from_slice(&[c(s), c(0.), c(0.), c(s)]).unwrap();
        let layout = TensorLayout::new(2, 2).unwrap();
        for j in 0..2 {
            let r = reduced_density(&bell, &layout, j).unwrap();
            assert!((r.matrix() - CMatrix::identity(2, 2).scale(0.5)).camax() < 1e-15);
        }
    }
}
