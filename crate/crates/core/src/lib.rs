//! Quantum filtering for interacting particles under continuous observation,
//! and the mean-field limit of the resulting conditional dynamics.
//!
//! The one-particle space is `C^d`; an `N`-particle state lives in
//! `(C^d)^{⊗N}` with particle 0 as the slowest-varying tensor factor.

pub mod diagnostics;
pub mod error;
pub mod filtering;
pub mod hilbert;
pub mod manybody;
pub mod meanfield;
pub mod noise;
pub mod reduce;

pub use error::{Error, Result};
pub use filtering::{OneParticleModel, QuadraticSign, QuantumState, RunOptions, TrajectoryRecord};
pub use hilbert::{BoundedOp, CMatrix, CVector, DensityOp, Ket, PairKernel, TensorLayout, C64};
pub use noise::{NoiseBundle, SeedSpec, TimeGrid};
