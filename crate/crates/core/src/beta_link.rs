//! Beta calibration maps on quantiles and the induced density-ratio link.
//!
//! A map `c(q) = σ(a ln q − b ln(1−q) + c)` with logistic `σ` is applied to the
//! base CDF; its derivative `r(q)` multiplies the base PDF. Everything here is
//! evaluated in log space through `ln r = ln σ(z) + ln σ(−z) + ln(a(1−q) + bq) − ln q − ln(1−q)`,
//! which is algebraically the textbook ratio but stays finite in the tails.

use serde::{Deserialize, Serialize};

use crate::dist::GaussianPrediction;
use crate::error::{CalibError, Result};

/// Quantiles are clamped into `[Q_CLAMP, 1 − Q_CLAMP]` before any logarithm.
pub const Q_CLAMP: f64 = 1e-12;

/// `ln 1e-300`, the floor for log density ratios.
pub const LOG_FLOOR: f64 = -690.775_527_898_213_7;

/// Parameters `(a, b, c)` of one Beta calibration map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BetaParams {
    pub const IDENTITY: BetaParams = BetaParams { a: 1.0, b: 1.0, c: 0.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && c.is_finite() && a.is_finite() && b.is_finite()) {
            return Err(CalibError::invalid(format!(
                "beta parameters need a, b > 0 and finite c (got {a}, {b}, {c})"
            )));
        }
        Ok(BetaParams { a, b, c })
    }
}

/// Latent GP values `(w_a, w_b, w_c)` at one input.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentTriple(pub [f64; 3]);

/// Inverse scales `γ` and offsets `δ` of the latent-to-parameter transform,
/// ordered `(a, b, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkHyper {
    pub gamma: [f64; 3],
    pub delta: [f64; 3],
}

impl Default for LinkHyper {
    fn default() -> Self {
        LinkHyper {
            gamma: [1.0; 3],
            delta: [0.0; 3],
        }
    }
}

impl LinkHyper {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite()))
            || self.delta.iter().any(|d| !d.is_finite())
        {
            return Err(CalibError::invalid("link hyperparameters need finite γ > 0 and finite δ"));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn clamp_q(q: f64) -> f64 {
    q.clamp(Q_CLAMP, 1.0 - Q_CLAMP)
}

fn check_q(q: f64) -> Result<f64> {
    if !q.is_finite() {
        return Err(CalibError::invalid(format!("quantile {q} is not finite")));
    }
    Ok(clamp_q(q))
}

/// The Beta calibration map applied to quantile `q`.
pub fn beta_map(q: f64, p: &BetaParams) -> Result<f64> {
    let q = check_q(q)?;
    Ok(sigmoid(p.a * q.ln() - p.b * (1.0 - q).ln() + p.c))
}

/// Derivative of [`beta_map`] in `q`: the ratio between calibrated and base densities.
pub fn beta_link_ratio(q: f64, p: &BetaParams) -> Result<f64> {
    let q = check_q(q)?;
    Ok(log_ratio(q, 1.0 - q, p).0.exp())
}

/// `ln r(q)` and its partials in `(a, b, c)`, with `qc = 1 − q` supplied
/// separately so upper-tail quantiles keep their precision.
fn log_ratio(q: f64, qc: f64, p: &BetaParams) -> (f64, [f64; 3]) {
    let (ln_q, ln_qc) = (q.ln(), qc.ln());
    let z = p.a * ln_q - p.b * ln_qc + p.c;
    let mix = p.a * qc + p.b * q;
    let value = -softplus(-z) - softplus(z) + mix.ln() - ln_q - ln_qc;
    if !(value > LOG_FLOOR) {
        return (LOG_FLOOR, [0.0; 3]);
    }
    let dz = 1.0 - 2.0 * sigmoid(z);
    let grad = [dz * ln_q + qc / mix, -dz * ln_qc + q / mix, dz];
    (value, grad)
}

/// Maps latent values to Beta parameters: `a = exp(w_a/γ_a + δ_a)`,
/// `b = exp(w_b/γ_b + δ_b)`, `c = w_c/γ_c + δ_c`.
pub fn link_params_from_latent(w: &LatentTriple, h: &LinkHyper) -> BetaParams {
    let [wa, wb, wc] = w.0;
    BetaParams {
        a: (wa / h.gamma[0] + h.delta[0]).exp(),
        b: (wb / h.gamma[1] + h.delta[1]).exp(),
        c: wc / h.gamma[2] + h.delta[2],
    }
}

/// Base-model quantities at one target, precomputed once per instance.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationPoint {
    q: f64,
    qc: f64,
    log_base: f64,
}

impl CalibrationPoint {
    pub fn new(y: f64, pred: &GaussianPrediction) -> Self {
        let z = (y - pred.mu) / pred.std();
        CalibrationPoint {
            q: clamp_q(crate::dist::standard_normal_cdf(z)),
            qc: clamp_q(crate::dist::standard_normal_cdf(-z)),
            log_base: pred.log_pdf(y),
        }
    }

    /// Base log-density `ln s_y`.
    pub fn log_base(&self) -> f64 {
        self.log_base
    }

    pub fn log_density(&self, p: &BetaParams) -> f64 {
        self.log_base + log_ratio(self.q, self.qc, p).0
    }

    /// Calibrated log-density and its gradient in `(a, b, c)`.
    pub fn log_density_grad_params(&self, p: &BetaParams) -> (f64, [f64; 3]) {
        let (lr, g) = log_ratio(self.q, self.qc, p);
        (self.log_base + lr, g)
    }

    /// Calibrated log-density and its gradient with respect to the latent
    /// triple, plus the gradient with respect to `(ln γ, δ)`.
    pub fn log_density_grad_latent(&self, w: &LatentTriple, h: &LinkHyper) -> LatentGrad {
        let p = link_params_from_latent(w, h);
        let (value, [ga, gb, gc]) = self.log_density_grad_params(&p);
        // ∂a/∂w_a = a/γ_a, ∂a/∂δ_a = a, ∂a/∂ln γ_a = −a w_a/γ_a; same for b; c is affine.
        let [wa, wb, wc] = w.0;
        let da = ga * p.a;
        let db = gb * p.b;
        LatentGrad {
            value,
            d_w: [da / h.gamma[0], db / h.gamma[1], gc / h.gamma[2]],
            d_log_gamma: [-da * wa / h.gamma[0], -db * wb / h.gamma[1], -gc * wc / h.gamma[2]],
            d_delta: [da, db, gc],
        }
    }
}

/// Output of [`CalibrationPoint::log_density_grad_latent`].
#[derive(Debug, Clone, Copy)]
pub struct LatentGrad {
    pub value: f64,
    pub d_w: [f64; 3],
    pub d_log_gamma: [f64; 3],
    pub d_delta: [f64; 3],
}

/// `ln s_y + ln r(q_y)` for the Gaussian base prediction `pred` recalibrated by `p`.
pub fn log_calibrated_density(y: f64, pred: &GaussianPrediction, p: &BetaParams) -> f64 {
    CalibrationPoint::new(y, pred).log_density(p)
}
