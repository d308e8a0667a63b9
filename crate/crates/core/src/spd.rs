//! Spectral linear algebra for real symmetric matrices.
//!
//! Everything here goes through one dense cyclic Jacobi eigensolver. The
//! matrices seen by the network are small (a few dozen rows at most), where
//! Jacobi is both accurate and deterministic. Eigenvalues are returned in
//! ascending order and every eigenvector is sign-normalized so that its first
//! non-negligible entry is positive.

use nalgebra::{DMatrix, DVector};

use crate::error::{MattError, Result};

/// Absolute asymmetry tolerated by [`SymmetricMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues at or below this are rejected by the matrix logarithm.
pub const LOG_FLOOR: f64 = 1e-14;
/// Traces below this are treated as a degenerate (all-zero) covariance.
pub const DEGENERATE_TRACE: f64 = 1e-12;
/// Spectral tolerance for positive semidefiniteness.
pub const PSD_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// A dense real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        check_finite(&m, "symmetric matrix")?;
        let asym = max_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(MattError::NotSymmetric {
                max_asymmetry: asym,
            });
        }
        Ok(Self(m))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// A symmetric positive-definite matrix together with a certificate of its
/// smallest eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
    min_eig: f64,
}

impl SpdMatrix {
    /// Validate symmetry and positive definiteness.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let sym = SymmetricMatrix::new(m)?;
        let eig = sym_eig(&sym)?;
        let min_eig = eig.values[0];
        if !(min_eig > 0.0) {
            return Err(MattError::NotPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self {
            mat: sym.into_inner(),
            min_eig,
        })
    }

    /// Symmetrize `m` (removing round-off asymmetry) and validate.
    pub fn from_symmetrized(m: &DMatrix<f64>) -> Result<Self> {
        check_square(m)?;
        Self::new(sym_part(m))
    }

    /// Build from a spectral decomposition whose eigenvalues are all positive.
    pub(crate) fn from_spectrum(vectors: &DMatrix<f64>, values: &DVector<f64>) -> Result<Self> {
        let min_eig = values.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min_eig > 0.0) {
            return Err(MattError::NotPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        let mat = sym_part(&(vectors * DMatrix::from_diagonal(values) * vectors.transpose()));
        Ok(Self { mat, min_eig })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mat: DMatrix::identity(n, n),
            min_eig: 1.0,
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn min_eig_floor(&self) -> f64 {
        self.min_eig
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    pub fn to_symmetric(&self) -> SymmetricMatrix {
        SymmetricMatrix(self.mat.clone())
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.mat
    }

    /// Re-run the full invariant check (symmetry, finiteness, spectrum).
    pub fn verify(&self) -> Result<()> {
        Self::new(self.mat.clone()).map(|_| ())
    }
}

/// Orthogonal diagonalization `S = U diag(values) Uᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    /// Columns are eigenvectors.
    pub vectors: DMatrix<f64>,
    /// Ascending.
    pub values: DVector<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map(|x| x)
    }

    /// `U diag(f(σ)) Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mapped = self.values.map(f);
        self.congruence(&mapped)
    }

    pub(crate) fn congruence(&self, diag: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= diag[j];
        }
        sym_part(&(scaled * self.vectors.transpose()))
    }
}

/// Eigendecomposition of a symmetric matrix.
pub fn sym_eig(s: &SymmetricMatrix) -> Result<EigenPair> {
    eigh(s.matrix())
}

/// Eigendecomposition of a square matrix assumed symmetric; only the
/// symmetric part is used.
pub fn eigh(m: &DMatrix<f64>) -> Result<EigenPair> {
    check_square(m)?;
    check_finite(m, "eigensolver input")?;
    let n = m.nrows();
    // Row-major working copy of the symmetric part.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frobenius = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = false;
    let mut off_norm = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        off_norm = off_diagonal_norm(&a, n);
        if off_norm <= 1e-15 * frobenius || off_norm == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                jacobi_rotate(&mut a, &mut v, n, p, q, c, s, t);
            }
        }
    }
    if !converged {
        return Err(MattError::SpectralFailure {
            dim: n,
            sweeps: MAX_SWEEPS,
            off_norm,
            frobenius,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[i * n + i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[(row, col)] = v[row * n + src];
        }
        let lead = (0..n)
            .map(|row| vectors[(row, col)])
            .find(|x| x.abs() > 1e-8)
            .unwrap_or(1.0);
        if lead < 0.0 {
            vectors.column_mut(col).neg_mut();
        }
    }
    Ok(EigenPair { vectors, values })
}

#[allow(clippy::too_many_arguments)]
fn jacobi_rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let apq = a[p * n + q];
    let tau = s / (1.0 + c);
    a[p * n + p] -= t * apq;
    a[q * n + q] += t * apq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        let new_kp = akp - s * (akq + tau * akp);
        let new_kq = akq + s * (akp - tau * akq);
        a[k * n + p] = new_kp;
        a[p * n + k] = new_kp;
        a[k * n + q] = new_kq;
        a[q * n + k] = new_kq;
    }
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = vkp - s * (vkq + tau * vkp);
        v[k * n + q] = vkq + s * (vkp - tau * vkq);
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += 2.0 * a[i * n + j] * a[i * n + j];
        }
    }
    sum.sqrt()
}

/// Matrix exponential of a symmetric matrix.
pub fn mat_exp_sym(s: &SymmetricMatrix) -> Result<SpdMatrix> {
    let eig = sym_eig(s)?;
    exp_from_eig(&eig)
}

pub(crate) fn exp_from_eig(eig: &EigenPair) -> Result<SpdMatrix> {
    let max = eig.values.max();
    if max > f64::MAX.ln() {
        return Err(MattError::Range(format!(
            "exponential overflows: largest eigenvalue {max}"
        )));
    }
    let values = eig.values.map(f64::exp);
    if !(values.min() > 0.0) {
        return Err(MattError::Range(format!(
            "exponential underflows: smallest eigenvalue {}",
            eig.values.min()
        )));
    }
    SpdMatrix::from_spectrum(&eig.vectors, &values)
}

/// Principal matrix logarithm of an SPD matrix.
pub fn mat_log_spd(p: &SpdMatrix) -> Result<SymmetricMatrix> {
    let eig = eigh(p.matrix())?;
    log_from_eig(&eig)
}

pub(crate) fn log_from_eig(eig: &EigenPair) -> Result<SymmetricMatrix> {
    let min = eig.values.min();
    if !(min > LOG_FLOOR) {
        return Err(MattError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    Ok(SymmetricMatrix(eig.map(f64::ln)))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    check_square(a)?;
    check_finite(a, "symmetrize input")?;
    Ok(SymmetricMatrix(sym_part(a)))
}

/// Trace-normalize a covariance and lift its spectrum by `eps`.
///
/// A covariance with (numerically) zero trace maps to `eps·I`.
pub fn regularize_spd(c: &SymmetricMatrix, eps: f64) -> Result<SpdMatrix> {
    if !(eps > 0.0) {
        return Err(MattError::Config(format!("eps must be positive, got {eps}")));
    }
    let n = c.dim();
    let eig = sym_eig(c)?;
    let min = eig.values.min();
    if min < -PSD_TOL {
        return Err(MattError::NotPositiveSemidefinite {
            min_eigenvalue: min,
        });
    }
    let trace = c.matrix().trace();
    if trace <= DEGENERATE_TRACE {
        return Ok(SpdMatrix {
            mat: DMatrix::identity(n, n) * eps,
            min_eig: eps,
        });
    }
    let mut mat = c.matrix() / trace;
    for i in 0..n {
        mat[(i, i)] += eps;
    }
    let min_eig = min / trace + eps;
    if !(min_eig > 0.0) {
        return Err(MattError::NotPositiveDefinite {
            min_eigenvalue: min_eig,
        });
    }
    Ok(SpdMatrix { mat, min_eig })
}

pub(crate) fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(MattError::Shape(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MattError::NonFinite(what.to_string()))
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}
