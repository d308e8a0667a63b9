//! Backward rule for spectral matrix functions `F(P) = U f(Σ) Uᵀ`.
//!
//! The vector-Jacobian product is the Daleckii–Krein formula
//! `U (K ∘ (Uᵀ Ḡ U)) Uᵀ` with `K[i][j]` the first divided difference of `f`
//! on the eigenvalues and `Ḡ` the symmetric part of the upstream adjoint.

use nalgebra::DMatrix;

use crate::error::{MattError, Result};
use crate::spd::{sym_part, EigenPair, SymmetricMatrix, LOG_FLOOR};

/// Relative gap below which two eigenvalues are treated as equal.
pub const REPEATED_EIG_TOL: f64 = 1e-12;

/// A scalar function lifted to symmetric matrices through the spectrum.
pub trait SpectralFunction {
    fn value(&self, x: f64) -> Result<f64>;

    fn derivative(&self, x: f64) -> f64;

    /// `(f(a) − f(b)) / (a − b)` for `a ≠ b`.
    fn divided_difference(&self, a: f64, b: f64) -> Result<f64> {
        Ok((self.value(a)? - self.value(b)?) / (a - b))
    }
}

/// The matrix functions used by the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralFn {
    Log,
    Exp,
    /// `max(σ, floor)`, the ReEig rectifier.
    Clamp(f64),
}

impl SpectralFunction for SpectralFn {
    fn value(&self, x: f64) -> Result<f64> {
        match *self {
            SpectralFn::Log => {
                if x > LOG_FLOOR {
                    Ok(x.ln())
                } else {
                    Err(MattError::Domain(format!("log of eigenvalue {x:e}")))
                }
            }
            SpectralFn::Exp => {
                let y = x.exp();
                if y.is_finite() {
                    Ok(y)
                } else {
                    Err(MattError::Range(format!("exp of eigenvalue {x}")))
                }
            }
            SpectralFn::Clamp(floor) => Ok(x.max(floor)),
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match *self {
            SpectralFn::Log => 1.0 / x,
            SpectralFn::Exp => x.exp(),
            SpectralFn::Clamp(floor) => {
                if x > floor {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn divided_difference(&self, a: f64, b: f64) -> Result<f64> {
        match *self {
            SpectralFn::Log => {
                self.value(a)?;
                self.value(b)?;
                Ok(((a - b) / b).ln_1p() / (a - b))
            }
            SpectralFn::Exp => Ok(b.exp() * (a - b).exp_m1() / (a - b)),
            SpectralFn::Clamp(_) => Ok((self.value(a)? - self.value(b)?) / (a - b)),
        }
    }
}

/// An arbitrary function given as a value/derivative pair.
pub struct FnPair<F, D> {
    pub f: F,
    pub f_prime: D,
}

impl<F: Fn(f64) -> f64, D: Fn(f64) -> f64> SpectralFunction for FnPair<F, D> {
    fn value(&self, x: f64) -> Result<f64> {
        let y = (self.f)(x);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(MattError::Domain(format!("function undefined at eigenvalue {x}")))
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        (self.f_prime)(x)
    }
}

/// Divided-difference matrix `K` on the spectrum of `eig`.
pub fn divided_differences(eig: &EigenPair, f: &impl SpectralFunction) -> Result<DMatrix<f64>> {
    let n = eig.dim();
    let sigma = &eig.values;
    let scale = sigma.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let tol = REPEATED_EIG_TOL * scale;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        f.value(sigma[i])?;
        k[(i, i)] = f.derivative(sigma[i]);
        for j in (i + 1)..n {
            let (a, b) = (sigma[i], sigma[j]);
            let v = if (a - b).abs() <= tol {
                f.derivative(0.5 * (a + b))
            } else {
                f.divided_difference(a, b)?
            };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// VJP of `P ↦ U f(Σ) Uᵀ` at the factorization `eig`.
pub fn vjp_spectral(
    eig: &EigenPair,
    f: &impl SpectralFunction,
    upstream: &SymmetricMatrix,
) -> Result<SymmetricMatrix> {
    let g = vjp_spectral_raw(eig, f, upstream.matrix())?;
    SymmetricMatrix::new(g)
}

pub(crate) fn vjp_spectral_raw(
    eig: &EigenPair,
    f: &impl SpectralFunction,
    upstream: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if upstream.nrows() != eig.dim() || upstream.ncols() != eig.dim() {
        return Err(MattError::Shape(format!(
            "upstream {}x{} does not match factorization of dim {}",
            upstream.nrows(),
            upstream.ncols(),
            eig.dim()
        )));
    }
    let k = divided_differences(eig, f)?;
    let u = &eig.vectors;
    let inner = u.transpose() * sym_part(upstream) * u;
    let weighted = inner.component_mul(&k);
    Ok(sym_part(&(u * weighted * u.transpose())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_symmetric_with_spectrum, seeded_rng};
    use crate::spd::eigh;

    #[test]
    fn identity_function_passes_symmetrized_upstream() {
        let mut rng = seeded_rng(1);
        let p = random_symmetric_with_spectrum(&[0.5, 1.0, 2.0, 4.0], &mut rng);
        let eig = eigh(&p).unwrap();
        let g = crate::sampling::gaussian_matrix(4, 4, 1.0, &mut rng);
        let id = FnPair { f: |x: f64| x, f_prime: |_x: f64| 1.0 };
        let out = vjp_spectral_raw(&eig, &id, &g).unwrap();
        assert!((out - sym_part(&g)).norm() < 1e-12);
    }

    #[test]
    fn log_at_identity_is_passthrough() {
        let eig = eigh(&DMatrix::identity(3, 3)).unwrap();
        let g = SymmetricMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 2.0, 3.0, 2.0, -1.0, 0.5, 3.0, 0.5, 4.0],
        ))
        .unwrap();
        let out = vjp_spectral(&eig, &SpectralFn::Log, &g).unwrap();
        assert!((out.matrix() - g.matrix()).norm() < 1e-14);
    }

    #[test]
    fn log_matches_finite_differences() {
        let mut rng = seeded_rng(2);
        let p = random_symmetric_with_spectrum(&[0.3, 0.7, 1.1, 1.9, 3.2, 5.0], &mut rng);
        let g = sym_part(&crate::sampling::gaussian_matrix(6, 6, 1.0, &mut rng));
        let eig = eigh(&p).unwrap();
        let analytic = vjp_spectral_raw(&eig, &SpectralFn::Log, &g).unwrap();
        let objective = |m: &DMatrix<f64>| {
            let l = eigh(m).unwrap().map(f64::ln);
            g.dot(&l)
        };
        // Symmetric perturbations E_ij + E_ji.
        for i in 0..6 {
            for j in i..6 {
                let h = 1e-6 * (1.0 + p[(i, j)].abs());
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus[(i, j)] += h;
                minus[(i, j)] -= h;
                if i != j {
                    plus[(j, i)] += h;
                    minus[(j, i)] -= h;
                }
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = if i == j { analytic[(i, i)] } else { 2.0 * analytic[(i, j)] };
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "({i},{j}) fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn repeated_eigenvalues_use_derivative() {
        let eig = eigh(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 2.0, 3.0]))).unwrap();
        let k = divided_differences(&eig, &SpectralFn::Log).unwrap();
        assert!((k[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((k[(0, 2)] - (3f64.ln() - 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn clamp_divided_differences() {
        let f = SpectralFn::Clamp(1e-4);
        assert_eq!(f.divided_difference(1.0, 0.5).unwrap(), 1.0);
        assert_eq!(f.divided_difference(1e-6, 1e-5).unwrap(), 0.0);
        let mixed = f.divided_difference(1.0, 1e-6).unwrap();
        assert!((mixed - (1.0 - 1e-4) / (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn log_domain_error() {
        let eig = eigh(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 1.0]))).unwrap();
        assert!(matches!(
            divided_differences(&eig, &SpectralFn::Log),
            Err(MattError::Domain(_))
        ));
    }
}
