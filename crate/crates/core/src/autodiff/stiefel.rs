//! Riemannian descent on the manifold of row-orthonormal matrices
//! `{W ∈ R^{p×n} : W Wᵀ = I_p}`.
//!
//! The attention weights are stored as `d_u × d_c` matrices acting by
//! congruence (`W X Wᵀ`), so the constraint is on rows. Transposing maps this
//! onto the usual column-orthonormal Stiefel manifold, and every operation
//! below is the transpose of its column-convention counterpart.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{MattError, Result};
use crate::sampling::gaussian_matrix;

/// Tolerance on `‖W Wᵀ − I‖_F` accepted by [`StiefelParam::new`].
pub const ORTHONORMALITY_TOL: f64 = 1e-6;

const RANK_TOL: f64 = 1e-10;

/// A matrix with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelParam {
    w: DMatrix<f64>,
    /// Multiplier applied to the learning rate of this parameter.
    lr_scale: f64,
}

impl StiefelParam {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.nrows() > w.ncols() {
            return Err(MattError::Shape(format!(
                "stiefel parameter needs 0 < rows <= cols, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        let resid = orthonormality_residual(&w);
        if !(resid < ORTHONORMALITY_TOL) {
            return Err(MattError::Contract(format!(
                "rows are not orthonormal (residual {resid:e})"
            )));
        }
        Ok(Self { w, lr_scale: 1.0 })
    }

    /// Gaussian draw followed by QR retraction.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Self> {
        if rows == 0 || rows > cols {
            return Err(MattError::Shape(format!(
                "stiefel parameter needs 0 < rows <= cols, got {rows}x{cols}"
            )));
        }
        loop {
            match retract_qr(&gaussian_matrix(rows, cols, 1.0, rng)) {
                Ok(p) => return Ok(p),
                Err(MattError::RankDeficient { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// The first `rows` rows of the identity.
    pub fn truncated_identity(rows: usize, cols: usize) -> Result<Self> {
        Self::new(DMatrix::identity(rows, cols))
    }

    pub fn with_lr_scale(mut self, scale: f64) -> Self {
        self.lr_scale = scale;
        self
    }

    pub fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn rows(&self) -> usize {
        self.w.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w.ncols()
    }

    pub fn residual(&self) -> f64 {
        orthonormality_residual(&self.w)
    }
}

/// `‖W Wᵀ − I‖_F`.
pub fn orthonormality_residual(w: &DMatrix<f64>) -> f64 {
    let gram = w * w.transpose();
    (gram - DMatrix::identity(w.nrows(), w.nrows())).norm()
}

/// Project a Euclidean gradient onto the tangent space at `w`:
/// `G − sym(G Wᵀ) W`.
pub fn stiefel_tangent(w: &StiefelParam, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let wm = w.matrix();
    if g.shape() != wm.shape() {
        return Err(MattError::Shape(format!(
            "gradient {}x{} does not match parameter {}x{}",
            g.nrows(),
            g.ncols(),
            wm.nrows(),
            wm.ncols()
        )));
    }
    let gw = g * wm.transpose();
    let sym = (&gw + gw.transpose()) * 0.5;
    Ok(g - sym * wm)
}

/// QR retraction: orthonormalize the rows of `w_raw`, keeping the
/// triangular factor's diagonal positive.
pub fn retract_qr(w_raw: &DMatrix<f64>) -> Result<StiefelParam> {
    if w_raw.nrows() == 0 || w_raw.nrows() > w_raw.ncols() {
        return Err(MattError::Shape(format!(
            "retraction needs 0 < rows <= cols, got {}x{}",
            w_raw.nrows(),
            w_raw.ncols()
        )));
    }
    let q = orthonormalize_columns(&w_raw.transpose())?;
    Ok(StiefelParam {
        w: q.transpose(),
        lr_scale: 1.0,
    })
}

/// One Riemannian gradient step followed by retraction.
pub fn stiefel_step(w: &StiefelParam, g: &DMatrix<f64>, lr: f64) -> Result<StiefelParam> {
    let tangent = stiefel_tangent(w, g)?;
    let step = lr * w.lr_scale;
    if step == 0.0 || tangent.iter().all(|x| *x == 0.0) {
        return Ok(w.clone());
    }
    let moved = w.matrix() - tangent * step;
    let mut next = retract_qr(&moved)?;
    next.lr_scale = w.lr_scale;
    Ok(next)
}

/// Thin Q factor of `a` (n×p, p ≤ n) with positive diagonal in R, via
/// modified Gram–Schmidt with one reorthogonalization pass.
pub fn orthonormalize_columns(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = a.shape();
    if p > n {
        return Err(MattError::Shape(format!(
            "cannot orthonormalize {p} columns in dimension {n}"
        )));
    }
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut q = a.clone();
    for j in 0..p {
        for _pass in 0..2 {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let qk = q.column(k).clone_owned();
                q.column_mut(j).axpy(-proj, &qk, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if !(norm > RANK_TOL * scale) {
            return Err(MattError::RankDeficient {
                column: j,
                pivot: norm,
            });
        }
        q.column_mut(j).unscale_mut(norm);
    }
    Ok(q)
}
