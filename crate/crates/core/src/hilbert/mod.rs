//! Dense linear algebra on `C^d` and its tensor powers.
//!
//! The configuration space is a finite set of `d` points with counting
//! measure, so every integral kernel is a matrix and every integral a sum.

pub mod ops;
pub mod presets;
pub mod random;
pub mod tensor;
mod types;

pub use ops::{
    anticommutator, commutator, contract_kernel, expectation, expectation_density, hs_norm, re_im_parts,
    trace_norm, trace_of_product,
};
pub use tensor::{
    lift_pair, lift_pair_in, lift_single, lift_single_in, partial_trace, reduced_density, TensorLayout,
    DEFAULT_MAX_STATE_DIM,
};
pub use types::{
    hermitian_defect, swap_defect, BoundedOp, CMatrix, CVector, DensityOp, Ket, PairKernel, C64, DEFAULT_NORM_TOL,
    HERMITIAN_TOL,
};
pub(crate) use types::{I, ZERO};
