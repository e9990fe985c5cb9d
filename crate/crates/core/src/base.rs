//! Base regressors producing Gaussian predictions: ordinary least squares
//! with homoscedastic noise, and Bayesian ridge regression fitted by
//! evidence maximization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{Dataset, GaussianPrediction, VARIANCE_FLOOR};
use crate::error::{CalibError, Result};

/// Per-column affine standardization learned on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant columns keep scale 1 so they map to zero.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            mean.push(m);
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer { mean: vec![0.0; d], scale: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardized features with a trailing 1 for the intercept.
    pub fn design_row(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(CalibError::invalid(format!(
                "expected {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        let d = self.dim();
        Ok(DVector::from_fn(d + 1, |j, _| {
            if j == d {
                1.0
            } else {
                (x[j] - self.mean[j]) / self.scale[j]
            }
        }))
    }

    fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(x.nrows(), d + 1, |i, j| {
            if j == d {
                1.0
            } else {
                (x[(i, j)] - self.mean[j]) / self.scale[j]
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsModel {
    pub standardizer: Standardizer,
    /// Weights on standardized features, intercept last.
    pub weights: Vec<f64>,
    pub noise_var: f64,
}

impl OlsModel {
    /// Slopes and intercept in the original feature units, intercept last.
    pub fn coefficients(&self) -> Vec<f64> {
        let d = self.standardizer.dim();
        let mut out = Vec::with_capacity(d + 1);
        let mut intercept = self.weights[d];
        for j in 0..d {
            let w = self.weights[j] / self.standardizer.scale[j];
            intercept -= w * self.standardizer.mean[j];
            out.push(w);
        }
        out.push(intercept);
        out
    }
}

/// Relative pivot size below which a normal-equations matrix counts as singular.
const RANK_TOL: f64 = 1e-12;

pub fn ols_fit(ds: &Dataset) -> Result<OlsModel> {
    let (n, d) = (ds.len(), ds.n_features());
    if n <= d + 1 {
        return Err(CalibError::invalid(format!("OLS needs more than {} rows, got {n}", d + 1)));
    }
    let standardizer = Standardizer::fit(ds.features());
    let x = standardizer.design(ds.features());
    let y = DVector::from_column_slice(ds.targets());
    let gram = x.transpose() * &x;
    let max_diag = gram.diagonal().max();
    let chol = gram
        .clone()
        .cholesky()
        .filter(|c| c.l().diagonal().iter().all(|l| l * l > RANK_TOL * max_diag))
        .ok_or_else(|| CalibError::numerical("rank-deficient design matrix"))?;
    let w = chol.solve(&(x.transpose() * &y));
    let rss = (&y - &x * &w).norm_squared();
    let noise_var = (rss / (n - d - 1) as f64).max(VARIANCE_FLOOR);
    Ok(OlsModel { standardizer, weights: w.as_slice().to_vec(), noise_var })
}

pub fn ols_predict(m: &OlsModel, x: &[f64]) -> Result<GaussianPrediction> {
    let phi = m.standardizer.design_row(x)?;
    let mu = phi.iter().zip(&m.weights).map(|(a, b)| a * b).sum();
    Ok(GaussianPrediction::new(mu, m.noise_var))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesRidgeConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub initial_prior_precision: f64,
    pub initial_noise_precision: f64,
    /// Keep the prior precision fixed at its initial value.
    pub fix_prior_precision: bool,
}

impl Default for BayesRidgeConfig {
    fn default() -> Self {
        BayesRidgeConfig {
            max_iter: 300,
            tol: 1e-6,
            initial_prior_precision: 1e-2,
            initial_noise_precision: 1e-2,
            fix_prior_precision: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesRidgeModel {
    pub standardizer: Standardizer,
    pub weight_mean: Vec<f64>,
    /// Row-major `(d+1)×(d+1)` posterior covariance.
    pub weight_cov: Vec<f64>,
    pub noise_precision: f64,
    pub prior_precision: f64,
}

const MAX_PRECISION: f64 = 1.0 / VARIANCE_FLOOR;

pub fn bayes_ridge_fit(ds: &Dataset, max_iter: usize, tol: f64) -> Result<BayesRidgeModel> {
    bayes_ridge_fit_with(ds, &BayesRidgeConfig { max_iter, tol, ..BayesRidgeConfig::default() })
}

pub fn bayes_ridge_fit_with(ds: &Dataset, cfg: &BayesRidgeConfig) -> Result<BayesRidgeModel> {
    let n = ds.len();
    if n <= 2 {
        return Err(CalibError::invalid(format!("Bayesian ridge needs more than 2 rows, got {n}")));
    }
    if !(cfg.initial_prior_precision > 0.0 && cfg.initial_noise_precision > 0.0 && cfg.tol > 0.0) {
        return Err(CalibError::invalid("precisions and tolerance must be positive"));
    }
    let standardizer = Standardizer::fit(ds.features());
    let x = standardizer.design(ds.features());
    let y = DVector::from_column_slice(ds.targets());
    let p = x.ncols();
    let gram = x.transpose() * &x;
    let xty = x.transpose() * &y;

    let mut alpha = cfg.initial_prior_precision;
    let mut beta = cfg.initial_noise_precision;
    let posterior = |alpha: f64, beta: f64| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let a = &gram * beta + DMatrix::identity(p, p) * alpha;
        let cov = a
            .cholesky()
            .ok_or_else(|| CalibError::numerical("posterior precision not positive definite"))?
            .inverse();
        let mean = &cov * &xty * beta;
        Ok((cov, mean))
    };
    let (mut cov, mut mean) = posterior(alpha, beta)?;
    for iter in 0..cfg.max_iter {
        let gamma = p as f64 - alpha * cov.trace();
        let rss = (&y - &x * &mean).norm_squared();
        let new_alpha = if cfg.fix_prior_precision {
            alpha
        } else {
            (gamma / mean.norm_squared().max(f64::MIN_POSITIVE)).min(MAX_PRECISION)
        };
        let new_beta = ((n as f64 - gamma) / rss.max(f64::MIN_POSITIVE)).min(MAX_PRECISION);
        if !(new_alpha.is_finite() && new_alpha > 0.0 && new_beta.is_finite() && new_beta > 0.0) {
            return Err(CalibError::numerical(format!(
                "evidence updates diverged at iteration {iter} (prior {new_alpha}, noise {new_beta})"
            )));
        }
        let change = ((new_alpha - alpha) / alpha).abs().max(((new_beta - beta) / beta).abs());
        alpha = new_alpha;
        beta = new_beta;
        (cov, mean) = posterior(alpha, beta)?;
        if change < cfg.tol {
            break;
        }
    }
    Ok(BayesRidgeModel {
        standardizer,
        weight_mean: mean.as_slice().to_vec(),
        weight_cov: cov.transpose().as_slice().to_vec(),
        noise_precision: beta,
        prior_precision: alpha,
    })
}

pub fn bayes_ridge_predict(m: &BayesRidgeModel, x: &[f64]) -> Result<GaussianPrediction> {
    let phi = m.standardizer.design_row(x)?;
    let p = phi.len();
    if m.weight_mean.len() != p || m.weight_cov.len() != p * p {
        return Err(CalibError::invalid("model dimensions are inconsistent"));
    }
    let mu = phi.iter().zip(&m.weight_mean).map(|(a, b)| a * b).sum();
    let cov = DMatrix::from_row_slice(p, p, &m.weight_cov);
    let var = 1.0 / m.noise_precision + phi.dot(&(&cov * &phi));
    Ok(GaussianPrediction::new(mu, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::RngStream;

    fn line(n: usize, f: impl Fn(f64) -> f64) -> Dataset {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 3.0).collect();
        let ys = xs.iter().map(|&x| f(x)).collect();
        Dataset::new(DMatrix::from_column_slice(n, 1, &xs), ys).unwrap()
    }

    fn random_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.uniform(-4.0, 7.0));
        let y = (0..n)
            .map(|i| (0..d).map(|j| (j as f64 + 1.0) * x[(i, j)]).sum::<f64>() + 2.0 + rng.standard_normal())
            .collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn ols_exact_line() {
        let m = ols_fit(&line(20, |x| 2.0 * x)).unwrap();
        let c = m.coefficients();
        assert!((c[0] - 2.0).abs() < 1e-10 && c[1].abs() < 1e-10);
        assert_eq!(m.noise_var, VARIANCE_FLOOR);
        assert!((ols_predict(&m, &[5.0]).unwrap().mu - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ols_constant_target() {
        let m = ols_fit(&line(10, |_| 4.5)).unwrap();
        let c = m.coefficients();
        assert!(c[0].abs() < 1e-12 && (c[1] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn ols_matches_normal_equations_oracle() {
        let ds = random_dataset(50, 3, 8);
        let m = ols_fit(&ds).unwrap();
        let raw = DMatrix::from_fn(50, 4, |i, j| if j == 3 { 1.0 } else { ds.features()[(i, j)] });
        let lhs = raw.transpose() * &raw;
        let rhs = raw.transpose() * DVector::from_column_slice(ds.targets());
        let w = lhs.lu().solve(&rhs).unwrap();
        for (a, b) in m.coefficients().iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn ols_rejects_rank_deficient_design() {
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 });
        let ds = Dataset::new(x, (0..10).map(|i| i as f64).collect()).unwrap();
        assert!(ols_fit(&ds).is_err());
        let x = DMatrix::from_element(10, 1, 3.0);
        let ds = Dataset::new(x, (0..10).map(|i| i as f64).collect()).unwrap();
        assert!(ols_fit(&ds).is_err());
    }

    #[test]
    fn ols_predict_examples() {
        let m = OlsModel { standardizer: Standardizer::identity(2), weights: vec![0.0, 0.0, 3.0], noise_var: 0.7 };
        let p = ols_predict(&m, &[1.0, -4.0]).unwrap();
        assert_eq!((p.mu, p.var), (3.0, 0.7));
        assert_eq!(ols_predict(&m, &[9.0, 2.0]).unwrap().var, 0.7);
        assert!(ols_predict(&m, &[1.0]).is_err());
    }

    #[test]
    fn bayes_ridge_strong_prior_zeroes_weights() {
        let cfg = BayesRidgeConfig {
            initial_prior_precision: 1e12,
            fix_prior_precision: true,
            ..BayesRidgeConfig::default()
        };
        let m = bayes_ridge_fit_with(&random_dataset(40, 2, 3), &cfg).unwrap();
        assert!(m.weight_mean.iter().all(|w| w.abs() < 1e-6));
    }

    #[test]
    fn bayes_ridge_noise_free_matches_ols() {
        let ds = line(30, |x| 1.5 * x - 0.25);
        let b = bayes_ridge_fit(&ds, 500, 1e-8).unwrap();
        let o = ols_fit(&ds).unwrap();
        for x in [-3.0, 0.0, 2.0, 10.0] {
            let (pb, po) = (bayes_ridge_predict(&b, &[x]).unwrap(), ols_predict(&o, &[x]).unwrap());
            assert!((pb.mu - po.mu).abs() < 1e-4);
        }
    }

    #[test]
    fn bayes_ridge_variance_grows_away_from_data() {
        let ds = random_dataset(60, 1, 11);
        let m = bayes_ridge_fit(&ds, 300, 1e-8).unwrap();
        let centre = bayes_ridge_predict(&m, &[m.standardizer.mean[0]]).unwrap().var;
        let far = bayes_ridge_predict(&m, &[1e3]).unwrap().var;
        assert!(far > centre);
        assert!(centre > 1.0 / m.noise_precision);
        assert!((centre - 1.0 / m.noise_precision) < 0.1 / m.noise_precision);
        let noise = 1.0 / m.noise_precision;
        assert!(noise > 0.5 && noise < 2.0, "noise variance estimate {noise}");
    }

    #[test]
    fn bayes_ridge_variance_symmetric_for_isotropic_cov() {
        let s2 = 0.3;
        let m = BayesRidgeModel {
            standardizer: Standardizer::identity(2),
            weight_mean: vec![1.0, -2.0, 0.0],
            weight_cov: vec![s2, 0.0, 0.0, 0.0, s2, 0.0, 0.0, 0.0, s2],
            noise_precision: 4.0,
            prior_precision: 1.0,
        };
        for x in [[1.0, 2.0], [-3.5, 0.25], [10.0, -7.0]] {
            let neg = [-x[0], -x[1]];
            let (a, b) = (bayes_ridge_predict(&m, &x).unwrap(), bayes_ridge_predict(&m, &neg).unwrap());
            let oracle = 0.25 + s2 * (x[0] * x[0] + x[1] * x[1] + 1.0);
            assert!((a.var - b.var).abs() < 1e-14);
            assert!((a.var - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn fits_are_deterministic() {
        let ds = random_dataset(30, 2, 1);
        assert_eq!(bayes_ridge_fit(&ds, 100, 1e-6).unwrap(), bayes_ridge_fit(&ds, 100, 1e-6).unwrap());
        assert_eq!(ols_fit(&ds).unwrap(), ols_fit(&ds).unwrap());
    }
}
