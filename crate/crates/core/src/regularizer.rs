//! Orthogonality penalty on factor matrices and the combined training loss.
//!
//! For `u: n×r` the penalty is
//! `(ρ/r)·(‖uᵀu − I_r‖²_F + ‖uuᵀ − I_n‖²_F)`.
//! Both residuals are always included, so a tall matrix with orthonormal
//! columns still pays `(ρ/r)·(n − r)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoConfig {
    pub rho: f64,
    pub lambda: f64,
}

impl OrthoConfig {
    pub fn new(rho: f64, lambda: f64) -> Result<Self> {
        if !(rho >= 0.0 && lambda >= 0.0 && rho.is_finite() && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "rho and lambda must be finite and non-negative, got {rho} and {lambda}"
            )));
        }
        Ok(Self { rho, lambda })
    }
}

impl Default for OrthoConfig {
    fn default() -> Self {
        Self {
            rho: 0.0,
            lambda: 1.0,
        }
    }
}

/// `(uᵀu − I_r, uuᵀ − I_n)`
fn residuals(u: &Matrix) -> (Matrix, Matrix) {
    let mut gram = u.gram();
    let mut cogram = u.transpose().gram();
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) - 1.0);
    }
    for i in 0..cogram.rows() {
        cogram.set(i, i, cogram.get(i, i) - 1.0);
    }
    (gram, cogram)
}

pub fn ortho_penalty(u: &Matrix, rho: f64) -> f64 {
    let r = u.cols();
    assert!(r >= 1, "penalty needs at least one column");
    let (gram, cogram) = residuals(u);
    let g = gram.frobenius_norm();
    let c = cogram.frobenius_norm();
    rho / r as f64 * (g * g + c * c)
}

/// Gradient `(4ρ/r)·(u(uᵀu − I) + (uuᵀ − I)u)`.
pub fn ortho_penalty_grad(u: &Matrix, rho: f64) -> Matrix {
    let r = u.cols();
    assert!(r >= 1, "penalty needs at least one column");
    let (gram, cogram) = residuals(u);
    let left = u.matmul(&gram).expect("conformant");
    let right = cogram.matmul(u).expect("conformant");
    let c = 4.0 * rho / r as f64;
    Matrix::from_fn(u.rows(), r, |i, j| c * (left.get(i, j) + right.get(i, j)))
}

/// `ce + λ·Σ penalties`
pub fn total_loss(ce: f64, penalties: &[f64], lambda: f64) -> f64 {
    ce + lambda * penalties.iter().sum::<f64>()
}

/// `‖uᵀu − I‖_F`, the residual tracked to judge how orthogonal a factor is.
pub fn gram_residual(u: &Matrix) -> f64 {
    residuals(u).0.frobenius_norm()
}
