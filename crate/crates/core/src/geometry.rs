//! Log-Euclidean geometry on SPD matrices.
//!
//! Distances and means are computed in log-coordinates, where the manifold
//! is flat. The affine-invariant distance and its iterative Karcher mean are
//! kept behind the `oracle` feature and serve only to cross-check the
//! Log-Euclidean path.

use nalgebra::DMatrix;

use crate::error::{MattError, Result};
use crate::spd::{exp_from_eig, eigh, mat_log_spd, SpdMatrix};

/// Convex combination weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Weights must be non-negative and sum to one within `1e-10`.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(MattError::EmptyInput("weight vector".into()));
        }
        if let Some(bad) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(MattError::Weight(format!("weight {bad} is negative or non-finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(MattError::Weight(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(MattError::EmptyInput("weight vector".into()));
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_dims(a: &SpdMatrix, b: &SpdMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MattError::Shape(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `‖Log P1 − Log P2‖_F`.
pub fn lem_distance(p1: &SpdMatrix, p2: &SpdMatrix) -> Result<f64> {
    check_dims(p1, p2)?;
    let l1 = mat_log_spd(p1)?;
    let l2 = mat_log_spd(p2)?;
    Ok((l1.matrix() - l2.matrix()).norm())
}

/// `Exp(Σ w_l Log P_l)`.
pub fn weighted_le_mean(ps: &[SpdMatrix], w: &WeightVector) -> Result<SpdMatrix> {
    let first = ps
        .first()
        .ok_or_else(|| MattError::EmptyInput("weighted mean of no matrices".into()))?;
    if ps.len() != w.len() {
        return Err(MattError::Weight(format!(
            "{} weights for {} matrices",
            w.len(),
            ps.len()
        )));
    }
    let n = first.dim();
    let mut acc = DMatrix::zeros(n, n);
    for (p, wl) in ps.iter().zip(w.as_slice()) {
        check_dims(first, p)?;
        acc += mat_log_spd(p)?.matrix() * *wl;
    }
    exp_from_eig(&eigh(&acc)?)
}

/// Maps a Log-Euclidean distance into `(0, 1]`: `1 / (1 + ln(1 + d))`.
pub fn similarity_from_distance(d: f64) -> f64 {
    1.0 / (1.0 + d.ln_1p())
}

pub fn similarity(q: &SpdMatrix, k: &SpdMatrix) -> Result<f64> {
    Ok(similarity_from_distance(lem_distance(q, k)?))
}

#[cfg(feature = "oracle")]
pub use aim::{aim_distance, karcher_mean_aim, KARCHER_MAX_ITER, KARCHER_TOL};

#[cfg(feature = "oracle")]
mod aim {
    use super::*;
    use crate::spd::{log_from_eig, LOG_FLOOR};

    pub const KARCHER_TOL: f64 = 1e-9;
    pub const KARCHER_MAX_ITER: usize = 200;

    fn sqrt_and_inv_sqrt(p: &SpdMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let eig = eigh(p.matrix())?;
        let min = eig.values.min();
        if !(min > LOG_FLOOR) {
            return Err(MattError::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        Ok((eig.map(f64::sqrt), eig.map(|x| 1.0 / x.sqrt())))
    }

    /// Affine-invariant distance `‖Log(P1^{-1/2} P2 P1^{-1/2})‖_F`.
    pub fn aim_distance(p1: &SpdMatrix, p2: &SpdMatrix) -> Result<f64> {
        check_dims(p1, p2)?;
        let (_, inv_sqrt) = sqrt_and_inv_sqrt(p1)?;
        let inner = &inv_sqrt * p2.matrix() * &inv_sqrt;
        let eig = eigh(&inner)?;
        let min = eig.values.min();
        if !(min > 0.0) {
            return Err(MattError::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        Ok(eig.values.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt())
    }

    /// Affine-invariant Fréchet mean by fixed-point iteration from the
    /// arithmetic mean.
    pub fn karcher_mean_aim(ps: &[SpdMatrix], tol: f64, max_iter: usize) -> Result<SpdMatrix> {
        let first = ps
            .first()
            .ok_or_else(|| MattError::EmptyInput("karcher mean of no matrices".into()))?;
        let n = first.dim();
        let mut arith = DMatrix::zeros(n, n);
        for p in ps {
            check_dims(first, p)?;
            arith += p.matrix();
        }
        arith /= ps.len() as f64;
        let mut b = SpdMatrix::from_symmetrized(&arith)?;
        let mut residual = f64::INFINITY;
        for _ in 0..max_iter {
            let (sqrt, inv_sqrt) = sqrt_and_inv_sqrt(&b)?;
            let mut tangent = DMatrix::zeros(n, n);
            for p in ps {
                let inner = &inv_sqrt * p.matrix() * &inv_sqrt;
                tangent += log_from_eig(&eigh(&inner)?)?.into_inner();
            }
            tangent /= ps.len() as f64;
            residual = tangent.norm();
            if residual < tol {
                return Ok(b);
            }
            let step = exp_from_eig(&eigh(&tangent)?)?;
            b = SpdMatrix::from_symmetrized(&(&sqrt * step.matrix() * &sqrt))?;
        }
        Err(MattError::Convergence {
            iterations: max_iter,
            residual,
        })
    }
}
