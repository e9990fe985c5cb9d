//! Closed-form mean-embedding kernel between Gaussian predictions and the
//! coregionalized covariance over the three latent outputs.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::dist::GaussianPrediction;
use crate::error::{CalibError, Result};

/// Diagonal jitter added to kernel covariances before factorization.
pub const KERNEL_JITTER: f64 = 1e-6;

/// Embedding bandwidth `θ`; optimized on the log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub theta: f64,
}

impl KernelParams {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(CalibError::invalid(format!("kernel bandwidth must be positive, got {theta}")));
        }
        Ok(KernelParams { theta })
    }
}

/// Cholesky factor `L_B` of the 3×3 coregionalization matrix `B = L_B L_Bᵀ`.
///
/// Stored as the full lower triangle; the diagonal is kept positive by
/// optimizing its logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoregFactor {
    pub lower: [[f64; 3]; 3],
}

impl Default for CoregFactor {
    fn default() -> Self {
        CoregFactor {
            lower: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }
}

impl CoregFactor {
    pub fn factor(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| if c <= r { self.lower[r][c] } else { 0.0 })
    }

    /// `B = L_B L_Bᵀ`.
    pub fn matrix(&self) -> Matrix3<f64> {
        let l = self.factor();
        l * l.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        for r in 0..3 {
            if !(self.lower[r][r] > 0.0) {
                return Err(CalibError::invalid("coregionalization factor needs a positive diagonal"));
            }
            for c in 0..3 {
                if c > r && self.lower[r][c] != 0.0 {
                    return Err(CalibError::invalid("coregionalization factor must be lower triangular"));
                }
                if !self.lower[r][c].is_finite() {
                    return Err(CalibError::invalid("non-finite coregionalization factor"));
                }
            }
        }
        Ok(())
    }
}

/// `θ / sqrt(v1 + v2 + θ²) · exp(−(μ1 − μ2)² / (2(v1 + v2 + θ²)))`.
pub fn kernel_eval(p1: &GaussianPrediction, p2: &GaussianPrediction, kp: &KernelParams) -> f64 {
    let s = p1.var + p2.var + kp.theta * kp.theta;
    let d = p1.mu - p2.mu;
    kp.theta / s.sqrt() * (-d * d / (2.0 * s)).exp()
}

/// Kernel partials in `(μ1, v1, μ2, v2, θ)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KernelGrad {
    pub d_mu1: f64,
    pub d_var1: f64,
    pub d_mu2: f64,
    pub d_var2: f64,
    pub d_theta: f64,
}

pub(crate) fn kernel_eval_grad(
    p1: &GaussianPrediction,
    p2: &GaussianPrediction,
    kp: &KernelParams,
) -> KernelGrad {
    let theta = kp.theta;
    let s = p1.var + p2.var + theta * theta;
    let d = p1.mu - p2.mu;
    let k = theta / s.sqrt() * (-d * d / (2.0 * s)).exp();
    let dk_ds = k * (d * d / (2.0 * s * s) - 0.5 / s);
    KernelGrad {
        d_mu1: -k * d / s,
        d_var1: dk_ds,
        d_mu2: k * d / s,
        d_var2: dk_ds,
        d_theta: k / theta + dk_ds * 2.0 * theta,
    }
}

/// Gram matrix with entry `(i, j) = k(a_i, b_j)`.
pub fn kernel_matrix(a: &[GaussianPrediction], b: &[GaussianPrediction], kp: &KernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel_eval(&a[i], &b[j], kp))
}

/// `K ⊗ B` in instance-major order: entry `(3i+p, 3j+q) = K[i,j]·B[p,q]`.
pub fn kron_coreg(k: &DMatrix<f64>, cf: &CoregFactor) -> DMatrix<f64> {
    kron_with(k, &cf.matrix())
}

pub(crate) fn kron_with(k: &DMatrix<f64>, b: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(3 * k.nrows(), 3 * k.ncols(), |r, c| k[(r / 3, c / 3)] * b[(r % 3, c % 3)])
}
