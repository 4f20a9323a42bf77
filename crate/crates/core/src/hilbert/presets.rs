//! Named operators and the `[re, im]` matrix literal format used in configs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::types::{BoundedOp, CMatrix, C64};

fn from_rows(d: usize, entries: &[(f64, f64)]) -> BoundedOp {
    let flat: Vec<C64> = entries.iter().map(|&(re, im)| C64::new(re, im)).collect();
    BoundedOp::from_matrix_unchecked(CMatrix::from_row_slice(d, d, &flat))
}

pub fn pauli_x() -> BoundedOp {
    from_rows(2, &[(0., 0.), (1., 0.), (1., 0.), (0., 0.)])
}

pub fn pauli_y() -> BoundedOp {
    from_rows(2, &[(0., 0.), (0., -1.), (0., 1.), (0., 0.)])
}

pub fn pauli_z() -> BoundedOp {
    from_rows(2, &[(1., 0.), (0., 0.), (0., 0.), (-1., 0.)])
}

/// `|0⟩⟨1|`.
pub fn lowering() -> BoundedOp {
    from_rows(2, &[(0., 0.), (1., 0.), (0., 0.), (0., 0.)])
}

/// Resolve a preset name; `identity` takes its dimension from `dim`.
pub fn named(name: &str, dim: usize) -> Result<BoundedOp> {
    let op = match name {
        "pauli_x" => pauli_x(),
        "pauli_y" => pauli_y(),
        "pauli_z" => pauli_z(),
        "lowering" => lowering(),
        "identity" => return Ok(BoundedOp::identity(dim)),
        "zero" => return Ok(BoundedOp::zeros(dim)),
        other => return Err(Error::Format(format!("unknown operator preset `{other}`"))),
    };
    if op.dim() != dim {
        return Err(Error::Shape(format!("preset `{name}` is 2-dimensional, model dim is {dim}")));
    }
    Ok(op)
}

/// Matrix literal: row-major `[re, im]` pairs, either nested by row or flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixLiteral {
    Rows(Vec<Vec<[f64; 2]>>),
    Flat(Vec<[f64; 2]>),
}

impl MatrixLiteral {
    pub fn to_matrix(&self) -> Result<CMatrix> {
        let (d, flat): (usize, Vec<[f64; 2]>) = match self {
            MatrixLiteral::Rows(rows) => {
                let d = rows.len();
                if rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Shape("matrix literal rows must all have length equal to the row count".into()));
                }
                (d, rows.iter().flatten().copied().collect())
            }
            MatrixLiteral::Flat(v) => {
                let d = (v.len() as f64).sqrt().round() as usize;
                if d * d != v.len() {
                    return Err(Error::Shape(format!("flat matrix literal of length {} is not square", v.len())));
                }
                (d, v.clone())
            }
        };
        if d == 0 {
            return Err(Error::Shape("empty matrix literal".into()));
        }
        let entries: Vec<C64> = flat.iter().map(|[re, im]| C64::new(*re, *im)).collect();
        Ok(CMatrix::from_row_slice(d, d, &entries))
    }

    pub fn from_matrix(m: &CMatrix) -> Self {
        MatrixLiteral::Rows(
            (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pauli_algebra() {
        let (x, y, z) = (pauli_x(), pauli_y(), pauli_z());
        // σx σy = i σz
        let lhs = x.matrix() * y.matrix();
        let rhs = z.matrix() * C64::new(0.0, 1.0);
        assert!((lhs - rhs).camax() < 1e-15);
        assert!(x.is_unitary(0.0) && y.is_hermitian(0.0));
    }

    #[test]
    fn literal_round_trip_and_flat_form() {
        let lit: MatrixLiteral = serde_json::from_str("[[[0,0],[1,0]],[[1,0],[0,0]]]").unwrap();
        assert_eq!(lit.to_matrix().unwrap(), *pauli_x().matrix());
        let flat: MatrixLiteral = serde_json::from_str("[[1,0],[0,0],[0,0],[-1,0]]").unwrap();
        assert_eq!(flat.to_matrix().unwrap(), *pauli_z().matrix());
        let back = MatrixLiteral::from_matrix(pauli_y().matrix());
        assert_eq!(back.to_matrix().unwrap(), *pauli_y().matrix());
    }

    #[test]
    fn preset_dimension_mismatch() {
        assert!(matches!(named("pauli_x", 3), Err(Error::Shape(_))));
        assert_eq!(named("identity", 3).unwrap().dim(), 3);
        assert!(matches!(named("hadamard", 2), Err(Error::Format(_))));
    }
}
