//! Seeded random states and operators for property tests and verification suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::hilbert::types::{BoundedOp, CMatrix, CVector, DensityOp, Ket, PairKernel, C64};

pub type SampleRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SampleRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

/// Haar-distributed unit vector.
pub fn ket<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Ket {
    let v = CVector::from_fn(d, |_, _| gaussian(rng));
    let n = v.norm();
    Ket::new(v.unscale(n)).expect("finite gaussian sample")
}

/// `G G* / tr(G G*)` with `G` a complex Gaussian `d × rank` matrix.
pub fn density<R: Rng + ?Sized>(rng: &mut R, d: usize, rank: usize) -> DensityOp {
    let g = gaussian_matrix(rng, d, rank.clamp(1, d));
    let m = &g * g.adjoint();
    let tr = m.trace().re;
    DensityOp::from_matrix_unchecked(m.unscale(tr)).hermitize()
}

pub fn projector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DensityOp {
    ket(rng, d).projector().expect("unit ket")
}

/// General complex operator rescaled to operator norm `norm_cap`.
pub fn bounded<R: Rng + ?Sized>(rng: &mut R, d: usize, norm_cap: f64) -> BoundedOp {
    let g = BoundedOp::from_matrix_unchecked(gaussian_matrix(rng, d, d));
    let n = g.norm();
    g.scale(norm_cap / n)
}

pub fn hermitian<R: Rng + ?Sized>(rng: &mut R, d: usize, norm_cap: f64) -> BoundedOp {
    let g = gaussian_matrix(rng, d, d);
    let h = BoundedOp::from_matrix_unchecked((&g + g.adjoint()).scale(0.5));
    let n = h.norm();
    h.scale(norm_cap / n)
}

pub fn anti_hermitian<R: Rng + ?Sized>(rng: &mut R, d: usize, norm_cap: f64) -> BoundedOp {
    let h = hermitian(rng, d, norm_cap);
    BoundedOp::from_matrix_unchecked(h.matrix() * C64::new(0.0, 1.0))
}

/// `exp(iK)` for a random Hermitian `K` with `‖K‖ = π`.
pub fn unitary<R: Rng + ?Sized>(rng: &mut R, d: usize) -> BoundedOp {
    let k = hermitian(rng, d, std::f64::consts::PI);
    BoundedOp::unitary_exp(&k, 1.0).expect("Hermitian generator")
}

/// Hermitian, swap-symmetric kernel with Hilbert–Schmidt norm `hs_cap`.
pub fn pair_kernel<R: Rng + ?Sized>(rng: &mut R, d: usize, hs_cap: f64) -> PairKernel {
    let dd = d * d;
    let g = gaussian_matrix(rng, dd, dd);
    let h = (&g + g.adjoint()).scale(0.5);
    let swapped = CMatrix::from_fn(dd, dd, |r, c| {
        let (x, y) = (r / d, r % d);
        let (xp, yp) = (c / d, c % d);
        h[(y * d + x, yp * d + xp)]
    });
    let sym = (h + swapped).scale(0.5);
    let hs = sym.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    PairKernel::from_matrix_unchecked(d, sym.scale(hs_cap / hs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleKind {
    Ket { dim: usize },
    Density { dim: usize, rank: usize },
    Bounded { dim: usize, norm_cap: f64 },
    PairKernel { dim: usize, hs_cap: f64 },
    Projector { dim: usize },
}

#[derive(Clone, Debug)]
pub enum Sample {
    Ket(Ket),
    Density(DensityOp),
    Bounded(BoundedOp),
    PairKernel(PairKernel),
    Projector(DensityOp),
}

/// One typed sample, a pure function of `(seed, kind)`.
pub fn random_sample(seed: u64, kind: SampleKind) -> Sample {
    let mut r = rng(seed);
    match kind {
        SampleKind::Ket { dim } => Sample::Ket(ket(&mut r, dim)),
        SampleKind::Density { dim, rank } => Sample::Density(density(&mut r, dim, rank)),
        SampleKind::Bounded { dim, norm_cap } => Sample::Bounded(bounded(&mut r, dim, norm_cap)),
        SampleKind::PairKernel { dim, hs_cap } => Sample::PairKernel(pair_kernel(&mut r, dim, hs_cap)),
        SampleKind::Projector { dim } => Sample::Projector(projector(&mut r, dim)),
    }
}
