//! Seeded random generation of matrices used for initialization, synthetic
//! data and randomized checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Haar-ish random orthogonal matrix (Gram–Schmidt of a Gaussian matrix).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let g = gaussian_matrix(n, n, 1.0, rng);
        if let Ok(q) = crate::autodiff::stiefel::orthonormalize_columns(&g) {
            return q;
        }
    }
}

/// `R diag(spectrum) Rᵀ` for a random orthogonal `R`.
pub fn random_symmetric_with_spectrum<R: Rng + ?Sized>(spectrum: &[f64], rng: &mut R) -> DMatrix<f64> {
    let r = random_orthogonal(spectrum.len(), rng);
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(spectrum));
    let m = &r * d * r.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random SPD matrix with log-eigenvalues uniform in `[-spread, spread]`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, spread: f64, rng: &mut R) -> crate::spd::SpdMatrix {
    let dist = Uniform::new_inclusive(-spread, spread).expect("valid range");
    let spectrum: Vec<f64> = (0..n).map(|_| dist.sample(rng).exp()).collect();
    crate::spd::SpdMatrix::from_symmetrized(&random_symmetric_with_spectrum(&spectrum, rng))
        .expect("positive spectrum")
}
