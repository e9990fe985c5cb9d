//! GP-Beta: a sparse variational multi-output GP over the three Beta
//! calibration parameters, indexed by the base model's predictive Gaussian.
//!
//! The latent vector is stacked instance-major, `[w_a⁽¹⁾, w_b⁽¹⁾, w_c⁽¹⁾, w_a⁽²⁾, …]`,
//! so prior covariances are `K ⊗ B`. The variational posterior lives on `m`
//! inducing inputs as `q(u) = N(m_u, L_u L_uᵀ)`; per-instance marginals
//! `q(w_i)` are 3×3 Gaussians sampled through `w = L_w ε + m_w`.
//!
//! Gradients of the ELBO are hand-derived reverse-mode at the matrix level.
//! The only dense factorization is the `3m × 3m` prior covariance of the
//! inducing outputs, so a step costs `O(m³ + m²·batch)` plus
//! `O(batch · samples)` for the Monte-Carlo likelihood.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::beta_link::{beta_map, link_params_from_latent, CalibrationPoint, LatentTriple, LinkHyper};
use crate::dist::{GaussianPrediction, GridDistribution, RngStream};
use crate::error::{CalibError, Result};
use crate::kernel::{kernel_eval, kernel_eval_grad, kron_with, CoregFactor, KernelParams, KERNEL_JITTER};
use crate::optim::AdamState;

/// Jitter added to each per-instance 3×3 marginal covariance before factorization.
pub const MARGINAL_JITTER: f64 = 1e-9;

/// Monte-Carlo samples per instance at prediction time.
pub const DEFAULT_PREDICT_SAMPLES: usize = 128;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_inducing: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Whether inducing inputs `(μ_u, σ²_u)` are optimized alongside everything else.
    #[serde(default = "default_true")]
    pub optimize_inducing: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::uci()
    }
}

impl TrainConfig {
    /// Settings for real-world data: learning rate 0.001.
    pub fn uci() -> Self {
        TrainConfig {
            n_inducing: 32,
            batch_size: 128,
            mc_samples: 64,
            learning_rate: 0.001,
            steps: 5000,
            seed: 0,
            optimize_inducing: true,
        }
    }

    /// Settings for the synthetic bimodal experiment: learning rate 0.01.
    pub fn synthetic() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            ..Self::uci()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inducing == 0 || self.batch_size == 0 || self.mc_samples == 0 || self.steps == 0 {
            return Err(CalibError::invalid("train config counts must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CalibError::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// All trainable state of a GP-Beta calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgpState {
    pub inducing: Vec<GaussianPrediction>,
    /// Variational mean, length `3m`.
    pub m_u: Vec<f64>,
    /// Lower Cholesky factor of the variational covariance, packed by rows
    /// (row `r` holds `r + 1` entries).
    pub l_u: Vec<Vec<f64>>,
    pub kernel: KernelParams,
    pub coreg: CoregFactor,
    pub link: LinkHyper,
}

/// Per-instance marginal `q(w_i) = N(mean, cov)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QwMarginal {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl QwMarginal {
    pub fn cholesky(&self) -> Result<Matrix3<f64>> {
        let jittered = self.cov + Matrix3::identity() * MARGINAL_JITTER;
        jittered
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| CalibError::numerical("marginal covariance is not positive definite"))
    }
}

/// `(step, ELBO estimate)` pairs recorded during [`fit`].
pub type TrainingTrace = Vec<(usize, f64)>;

fn packed_to_lower(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |r, c| if c <= r { rows[r][c] } else { 0.0 })
}

fn lower_to_packed(l: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..l.nrows()).map(|r| (0..=r).map(|c| l[(r, c)]).collect()).collect()
}

fn prior_covariance(inducing: &[GaussianPrediction], kernel: &KernelParams, b: &Matrix3<f64>) -> DMatrix<f64> {
    let kuu = DMatrix::from_fn(inducing.len(), inducing.len(), |i, j| kernel_eval(&inducing[i], &inducing[j], kernel));
    let mut cu = kron_with(&kuu, b);
    for d in 0..cu.nrows() {
        cu[(d, d)] += KERNEL_JITTER;
    }
    cu
}

fn factor_prior(cu: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    cu.cholesky()
        .ok_or_else(|| CalibError::numerical("inducing prior covariance is not positive definite after jitter"))
}

fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Initial state: inducing means at evenly spaced quantiles of the training
/// means paired with the median training variance, `q(u)` equal to the prior,
/// identity coregionalization, `θ` at the spread of the training means and
/// link hyperparameters that map the prior mean to the identity calibration.
pub fn init_state(train_preds: &[GaussianPrediction], cfg: &TrainConfig) -> Result<SvgpState> {
    cfg.validate()?;
    let m = cfg.n_inducing;
    if train_preds.len() < m {
        return Err(CalibError::invalid(format!(
            "{} training predictions cannot seed {m} inducing points",
            train_preds.len()
        )));
    }
    if train_preds.iter().any(|p| !p.is_finite()) {
        return Err(CalibError::invalid("non-finite training prediction"));
    }
    let mut mus: Vec<f64> = train_preds.iter().map(|p| p.mu).collect();
    mus.sort_by(f64::total_cmp);
    let mut vars: Vec<f64> = train_preds.iter().map(|p| p.var).collect();
    vars.sort_by(f64::total_cmp);
    let median_var = interpolated_quantile(&vars, 0.5);

    let inducing: Vec<GaussianPrediction> = (0..m)
        .map(|j| GaussianPrediction::new(interpolated_quantile(&mus, (j as f64 + 0.5) / m as f64), median_var))
        .collect();

    let n = mus.len() as f64;
    let mean = mus.iter().sum::<f64>() / n;
    let spread = (mus.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let theta = if spread > 0.0 && spread.is_finite() { spread } else { 1.0 };
    let kernel = KernelParams::new(theta)?;
    let coreg = CoregFactor::default();

    let chol = factor_prior(prior_covariance(&inducing, &kernel, &coreg.matrix()))?;
    Ok(SvgpState {
        inducing,
        m_u: vec![0.0; 3 * m],
        l_u: lower_to_packed(&chol.l()),
        kernel,
        coreg,
        link: LinkHyper::default(),
    })
}

/// Offsets of each parameter group inside the flat unconstrained vector.
///
/// Layout: inducing means (m), log inducing variances (m), `m_u` (3m),
/// `L_u` packed rows with log diagonal and each off-diagonal divided by its
/// column's diagonal, `ln θ`, `L_B` packed rows with log
/// diagonal (6), `ln γ` (3), `δ` (3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamLayout {
    pub m: usize,
    pub inducing_mu: usize,
    pub inducing_log_var: usize,
    pub m_u: usize,
    pub l_u: usize,
    pub log_theta: usize,
    pub l_b: usize,
    pub log_gamma: usize,
    pub delta: usize,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(m: usize) -> Self {
        let big = 3 * m;
        let inducing_mu = 0;
        let inducing_log_var = m;
        let m_u = 2 * m;
        let l_u = m_u + big;
        let log_theta = l_u + big * (big + 1) / 2;
        let l_b = log_theta + 1;
        let log_gamma = l_b + 6;
        let delta = log_gamma + 3;
        ParamLayout {
            m,
            inducing_mu,
            inducing_log_var,
            m_u,
            l_u,
            log_theta,
            l_b,
            log_gamma,
            delta,
            len: delta + 3,
        }
    }

    fn packed_index(r: usize, c: usize) -> usize {
        r * (r + 1) / 2 + c
    }
}

impl SvgpState {
    pub fn n_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.n_inducing())
    }

    pub fn l_u_matrix(&self) -> DMatrix<f64> {
        packed_to_lower(&self.l_u)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.inducing.len();
        if m == 0 {
            return Err(CalibError::invalid("state has no inducing points"));
        }
        if self.m_u.len() != 3 * m || self.l_u.len() != 3 * m {
            return Err(CalibError::invalid("variational parameter sizes disagree with inducing count"));
        }
        for (r, row) in self.l_u.iter().enumerate() {
            if row.len() != r + 1 || !(row[r] > 0.0) || row.iter().any(|v| !v.is_finite()) {
                return Err(CalibError::invalid(format!("variational factor row {r} is malformed")));
            }
        }
        if self.m_u.iter().any(|v| !v.is_finite()) || self.inducing.iter().any(|p| !p.is_finite() || !(p.var > 0.0)) {
            return Err(CalibError::invalid("non-finite variational mean or inducing input"));
        }
        KernelParams::new(self.kernel.theta)?;
        self.coreg.validate()?;
        self.link.validate()
    }

    /// Flattens the state into the unconstrained vector described by [`ParamLayout`].
    pub fn to_params(&self) -> Vec<f64> {
        let lay = self.layout();
        let mut p = vec![0.0; lay.len];
        for (j, z) in self.inducing.iter().enumerate() {
            p[lay.inducing_mu + j] = z.mu;
            p[lay.inducing_log_var + j] = z.var.ln();
        }
        p[lay.m_u..lay.m_u + self.m_u.len()].copy_from_slice(&self.m_u);
        for (r, row) in self.l_u.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                p[lay.l_u + ParamLayout::packed_index(r, c)] = if r == c { v.ln() } else { v / self.l_u[c][c] };
            }
        }
        p[lay.log_theta] = self.kernel.theta.ln();
        for r in 0..3 {
            for c in 0..=r {
                let v = self.coreg.lower[r][c];
                p[lay.l_b + ParamLayout::packed_index(r, c)] = if r == c { v.ln() } else { v };
            }
        }
        for k in 0..3 {
            p[lay.log_gamma + k] = self.link.gamma[k].ln();
            p[lay.delta + k] = self.link.delta[k];
        }
        p
    }

    /// Inverse of [`SvgpState::to_params`] for a state with `m` inducing points.
    pub fn from_params(m: usize, p: &[f64]) -> Result<SvgpState> {
        let lay = ParamLayout::new(m);
        if p.len() != lay.len {
            return Err(CalibError::invalid(format!("expected {} parameters, got {}", lay.len, p.len())));
        }
        let inducing = (0..m)
            .map(|j| GaussianPrediction {
                mu: p[lay.inducing_mu + j],
                var: p[lay.inducing_log_var + j].exp(),
            })
            .collect();
        let big = 3 * m;
        let diag: Vec<f64> = (0..big)
            .map(|c| p[lay.l_u + ParamLayout::packed_index(c, c)].exp())
            .collect();
        let l_u = (0..big)
            .map(|r| {
                (0..=r)
                    .map(|c| {
                        let v = p[lay.l_u + ParamLayout::packed_index(r, c)];
                        if r == c { diag[c] } else { v * diag[c] }
                    })
                    .collect()
            })
            .collect();
        let mut lower = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..=r {
                let v = p[lay.l_b + ParamLayout::packed_index(r, c)];
                lower[r][c] = if r == c { v.exp() } else { v };
            }
        }
        let mut link = LinkHyper::default();
        for k in 0..3 {
            link.gamma[k] = p[lay.log_gamma + k].exp();
            link.delta[k] = p[lay.delta + k];
        }
        Ok(SvgpState {
            inducing,
            m_u: p[lay.m_u..lay.m_u + big].to_vec(),
            l_u,
            kernel: KernelParams { theta: p[lay.log_theta].exp() },
            coreg: CoregFactor { lower },
            link,
        })
    }

    /// Precomputes the inducing-side quantities shared by every query.
    pub fn posterior(&self) -> Result<Posterior<'_>> {
        Posterior::new(self)
    }
}

/// Inducing-side factorizations for a fixed state.
pub struct Posterior<'a> {
    state: &'a SvgpState,
    b: Matrix3<f64>,
    cu_inv: DMatrix<f64>,
    log_det_cu: f64,
    l_u: DMatrix<f64>,
    v_u: DMatrix<f64>,
    /// `C_u⁻¹ m_u`
    beta: DVector<f64>,
}

impl<'a> Posterior<'a> {
    fn new(state: &'a SvgpState) -> Result<Self> {
        state.validate()?;
        let b = state.coreg.matrix();
        let chol = factor_prior(prior_covariance(&state.inducing, &state.kernel, &b))?;
        let log_det_cu = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let cu_inv = chol.inverse();
        let l_u = state.l_u_matrix();
        let v_u = &l_u * l_u.transpose();
        let beta = &cu_inv * DVector::from_column_slice(&state.m_u);
        Ok(Posterior {
            state,
            b,
            cu_inv,
            log_det_cu,
            l_u,
            v_u,
            beta,
        })
    }

    /// `KL[q(u) ‖ N(0, C_u)]`.
    pub fn kl(&self) -> f64 {
        let big = self.v_u.nrows() as f64;
        let trace = self.cu_inv.component_mul(&self.v_u).sum();
        let quad = DVector::from_column_slice(&self.state.m_u).dot(&self.beta);
        let log_det_vu = 2.0 * self.l_u.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        0.5 * (trace + quad - big + self.log_det_cu - log_det_vu)
    }

    /// `C_uw` for the queries, `3m × 3n`.
    fn cross_covariance(&self, preds: &[GaussianPrediction]) -> DMatrix<f64> {
        let kuw = DMatrix::from_fn(self.state.inducing.len(), preds.len(), |j, i| {
            kernel_eval(&self.state.inducing[j], &preds[i], &self.state.kernel)
        });
        kron_with(&kuw, &self.b)
    }

    /// Per-instance marginals of `q(w)`.
    pub fn marginals(&self, preds: &[GaussianPrediction]) -> Vec<QwMarginal> {
        let cuw = self.cross_covariance(preds);
        let t = &self.cu_inv * &cuw;
        let vt = &self.v_u * &t;
        let m_u = DVector::from_column_slice(&self.state.m_u);
        preds
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let ti = t.columns(3 * i, 3);
                let kdiag = kernel_eval(p, p, &self.state.kernel);
                let q: Matrix3<f64> = Matrix3::from_fn(|r, c| ti.column(r).dot(&cuw.column(3 * i + c)));
                let rr: Matrix3<f64> = Matrix3::from_fn(|r, c| ti.column(r).dot(&vt.column(3 * i + c)));
                let cov = self.b * kdiag - q + rr;
                QwMarginal {
                    mean: Vector3::from_fn(|r, _| ti.column(r).dot(&m_u)),
                    cov: (cov + cov.transpose()) * 0.5,
                }
            })
            .collect()
    }

    /// Draws `n` Beta parameter triples from `q(w⋆)` at `pred`.
    fn sample_params(&self, pred: &GaussianPrediction, n: usize, rng: &mut RngStream) -> Result<Vec<crate::beta_link::BetaParams>> {
        let marg = self.marginals(std::slice::from_ref(pred))[0];
        let l = marg.cholesky()?;
        Ok((0..n)
            .map(|_| {
                let eps = Vector3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal());
                let w = l * eps + marg.mean;
                link_params_from_latent(&LatentTriple([w[0], w[1], w[2]]), &self.state.link)
            })
            .collect())
    }

    /// Calibrated predictive density on `ys`, averaged over `mc_samples` draws.
    pub fn predict_density(
        &self,
        pred: &GaussianPrediction,
        ys: &[f64],
        mc_samples: usize,
        rng: &mut RngStream,
    ) -> Result<GridDistribution> {
        if mc_samples == 0 || ys.len() < 2 {
            return Err(CalibError::invalid("prediction needs samples and a grid"));
        }
        let span = 8.0 * pred.std();
        if ys[0] > pred.mu - span || ys[ys.len() - 1] < pred.mu + span {
            log::warn!("grid does not cover ±8 std of prediction {pred:?}; normalization may fail");
        }
        let draws = self.sample_params(pred, mc_samples, rng)?;
        let inv = 1.0 / mc_samples as f64;
        let pdf = ys
            .iter()
            .map(|&y| {
                let point = CalibrationPoint::new(y, pred);
                draws.iter().map(|p| point.log_density(p).exp()).sum::<f64>() * inv
            })
            .collect();
        GridDistribution::from_pdf(ys.to_vec(), pdf)
    }

    /// Mean calibration map `E[c_β(q)]` under `q(w⋆)` at each quantile of `q_grid`.
    pub fn predict_calibration_map(
        &self,
        pred: &GaussianPrediction,
        q_grid: &[f64],
        mc_samples: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        if q_grid.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(CalibError::invalid("calibration map quantiles must lie in (0, 1)"));
        }
        let draws = self.sample_params(pred, mc_samples.max(1), rng)?;
        let inv = 1.0 / draws.len() as f64;
        q_grid
            .iter()
            .map(|&q| {
                let mut acc = 0.0;
                for p in &draws {
                    acc += beta_map(q, p)?;
                }
                Ok(acc * inv)
            })
            .collect()
    }
}

/// KL term of the ELBO.
pub fn kl_term(state: &SvgpState) -> Result<f64> {
    Ok(state.posterior()?.kl())
}

/// Per-instance marginals of `q(w)` at `preds`.
pub fn q_w_marginal(state: &SvgpState, preds: &[GaussianPrediction]) -> Result<Vec<QwMarginal>> {
    Ok(state.posterior()?.marginals(preds))
}

pub fn predict_density(
    state: &SvgpState,
    pred: &GaussianPrediction,
    ys: &[f64],
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<GridDistribution> {
    state.posterior()?.predict_density(pred, ys, mc_samples, rng)
}

pub fn predict_calibration_map(
    state: &SvgpState,
    pred: &GaussianPrediction,
    q_grid: &[f64],
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    state.posterior()?.predict_calibration_map(pred, q_grid, mc_samples, rng)
}

/// Standard normal draws for a minibatch: `samples` triples per instance.
///
/// Holding these fixed gives common random numbers for gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct McNoise {
    samples: usize,
    draws: Vec<Vector3<f64>>,
}

impl McNoise {
    pub fn draw(n_instances: usize, samples: usize, rng: &mut RngStream) -> Self {
        let draws = (0..n_instances * samples)
            .map(|_| Vector3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal()))
            .collect();
        McNoise { samples, draws }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    fn instance(&self, i: usize) -> &[Vector3<f64>] {
        &self.draws[i * self.samples..(i + 1) * self.samples]
    }
}

/// Monte-Carlo ELBO with fresh noise from `rng`.
pub fn elbo(
    state: &SvgpState,
    batch: &[(GaussianPrediction, f64)],
    n_total: usize,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if mc_samples == 0 {
        return Err(CalibError::invalid("need at least one Monte-Carlo sample"));
    }
    let noise = McNoise::draw(batch.len(), mc_samples, rng);
    Ok(elbo_with_noise(state, batch, n_total, &noise, false)?.0)
}

/// ELBO under fixed noise, and its gradient in [`ParamLayout`] order when
/// `with_grad` is set.
///
/// `(n_total / |batch|) · Σᵢ mean_s ln p(yᵢ | wᵢₛ) − KL`.
pub fn elbo_with_noise(
    state: &SvgpState,
    batch: &[(GaussianPrediction, f64)],
    n_total: usize,
    noise: &McNoise,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(CalibError::invalid("empty minibatch"));
    }
    if noise.draws.len() != batch.len() * noise.samples || noise.samples == 0 {
        return Err(CalibError::invalid("noise does not match the minibatch"));
    }
    let post = state.posterior()?;
    let kernel = &state.kernel;
    let nb = batch.len();
    let m = state.inducing.len();
    let big = 3 * m;
    let b = post.b;
    let scale = n_total as f64 / (nb * noise.samples) as f64;

    // Forward: cross covariances and per-instance marginals.
    let kuw = DMatrix::from_fn(m, nb, |j, i| kernel_eval(&state.inducing[j], &batch[i].0, kernel));
    let cuw = kron_with(&kuw, &b);
    let t = &post.cu_inv * &cuw;
    let vt = &post.v_u * &t;
    let m_u = DVector::from_column_slice(&state.m_u);

    let mut loglik = 0.0;
    let mut g_blocks: Vec<Matrix3<f64>> = Vec::with_capacity(nb);
    let mut g_mean = DVector::zeros(3 * nb);
    let mut kdiag_bar = vec![0.0; nb];
    let mut b_bar = Matrix3::zeros();
    let mut log_gamma_bar = [0.0; 3];
    let mut delta_bar = [0.0; 3];

    for (i, (pred, y)) in batch.iter().enumerate() {
        let ti = t.columns(3 * i, 3);
        let kdiag = kernel_eval(pred, pred, kernel);
        let q: Matrix3<f64> = Matrix3::from_fn(|r, c| ti.column(r).dot(&cuw.column(3 * i + c)));
        let rr: Matrix3<f64> = Matrix3::from_fn(|r, c| ti.column(r).dot(&vt.column(3 * i + c)));
        let cov = b * kdiag - q + rr;
        let cov = (cov + cov.transpose()) * 0.5;
        let marg = QwMarginal {
            mean: Vector3::from_fn(|r, _| ti.column(r).dot(&m_u)),
            cov,
        };
        let l = marg.cholesky().map_err(|_| {
            CalibError::numerical(format!("marginal covariance of batch instance {i} is degenerate"))
        })?;
        let point = CalibrationPoint::new(*y, pred);
        let mut l_bar = Matrix3::zeros();
        let mut m_bar = Vector3::zeros();
        for eps in noise.instance(i) {
            let w = l * eps + marg.mean;
            let g = point.log_density_grad_latent(&LatentTriple([w[0], w[1], w[2]]), &state.link);
            loglik += g.value;
            if with_grad {
                let dw = Vector3::from(g.d_w);
                m_bar += dw;
                l_bar += dw * eps.transpose();
                for k in 0..3 {
                    log_gamma_bar[k] += g.d_log_gamma[k];
                    delta_bar[k] += g.d_delta[k];
                }
            }
        }
        if with_grad {
            let l_bar = (l_bar * scale).lower_triangle();
            let g = cholesky_backward3(&l, &l_bar);
            kdiag_bar[i] = g.component_mul(&b).sum();
            b_bar += g * kdiag;
            g_mean.rows_mut(3 * i, 3).copy_from(&(m_bar * scale));
            g_blocks.push(g);
        }
    }
    let kl = post.kl();
    let value = scale * loglik - kl;
    if !value.is_finite() {
        return Err(CalibError::numerical("ELBO is not finite"));
    }
    if !with_grad {
        return Ok((value, None));
    }
    for k in 0..3 {
        log_gamma_bar[k] *= scale;
        delta_bar[k] *= scale;
    }

    // Backward through V_w = k B − Tᵀ C_uw + Tᵀ V_u T and m_w = Tᵀ m_u, T = C_u⁻¹ C_uw.
    let mut gt = DMatrix::zeros(big, 3 * nb);
    for (i, g) in g_blocks.iter().enumerate() {
        let block = t.columns(3 * i, 3) * g;
        gt.columns_mut(3 * i, 3).copy_from(&block);
    }
    let t_bar = &post.v_u * &gt * 2.0 + &m_u * g_mean.transpose();
    let u = &post.cu_inv * &t_bar;
    let cuw_bar = &u - &gt * 2.0;
    let mut cu_bar = (&gt - &u) * t.transpose();
    let mut vu_bar = &gt * t.transpose();
    let mut m_u_bar = &t * &g_mean;

    // −KL contributions.
    m_u_bar -= &post.beta;
    vu_bar -= &post.cu_inv * 0.5;
    let cvc = &post.cu_inv * &post.v_u * &post.cu_inv;
    cu_bar += (cvc + &post.beta * post.beta.transpose() - &post.cu_inv) * 0.5;

    let lay = ParamLayout::new(m);
    let mut grad = vec![0.0; lay.len];

    // V_u = L_u L_uᵀ, plus Σ ln diag(L_u) from −KL.
    // Off-diagonals are stored relative to their column's diagonal.
    let mut lu_bar = (&vu_bar + vu_bar.transpose()) * &post.l_u;
    for c in 0..big {
        lu_bar[(c, c)] += 1.0 / post.l_u[(c, c)];
    }
    for c in 0..big {
        let d = post.l_u[(c, c)];
        let mut diag_grad = lu_bar[(c, c)] * d;
        for r in c + 1..big {
            grad[lay.l_u + ParamLayout::packed_index(r, c)] = lu_bar[(r, c)] * d;
            diag_grad += lu_bar[(r, c)] * post.l_u[(r, c)];
        }
        grad[lay.l_u + ParamLayout::packed_index(c, c)] = diag_grad;
    }
    grad[lay.m_u..lay.m_u + big].copy_from_slice(m_u_bar.as_slice());

    // Kronecker structure back to kernel entries and B.
    let mut kuu_bar = DMatrix::zeros(m, m);
    let kuu = DMatrix::from_fn(m, m, |i, j| kernel_eval(&state.inducing[i], &state.inducing[j], kernel));
    for i in 0..m {
        for j in 0..m {
            let blk = cu_bar.fixed_view::<3, 3>(3 * i, 3 * j);
            kuu_bar[(i, j)] = blk.component_mul(&b).sum();
            b_bar += blk * kuu[(i, j)];
        }
    }
    let mut kuw_bar = DMatrix::zeros(m, nb);
    for j in 0..m {
        for i in 0..nb {
            let blk = cuw_bar.fixed_view::<3, 3>(3 * j, 3 * i);
            kuw_bar[(j, i)] = blk.component_mul(&b).sum();
            b_bar += blk * kuw[(j, i)];
        }
    }

    // Kernel entries back to inducing inputs and θ.
    let mut theta_bar = 0.0;
    let mut z_mu_bar = vec![0.0; m];
    let mut z_var_bar = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            let kg = kernel_eval_grad(&state.inducing[i], &state.inducing[j], kernel);
            let w = kuu_bar[(i, j)];
            z_mu_bar[i] += w * kg.d_mu1;
            z_var_bar[i] += w * kg.d_var1;
            z_mu_bar[j] += w * kg.d_mu2;
            z_var_bar[j] += w * kg.d_var2;
            theta_bar += w * kg.d_theta;
        }
    }
    for j in 0..m {
        for (i, (pred, _)) in batch.iter().enumerate() {
            let kg = kernel_eval_grad(&state.inducing[j], pred, kernel);
            let w = kuw_bar[(j, i)];
            z_mu_bar[j] += w * kg.d_mu1;
            z_var_bar[j] += w * kg.d_var1;
            theta_bar += w * kg.d_theta;
        }
    }
    for (i, (pred, _)) in batch.iter().enumerate() {
        theta_bar += kdiag_bar[i] * kernel_eval_grad(pred, pred, kernel).d_theta;
    }
    for j in 0..m {
        grad[lay.inducing_mu + j] = z_mu_bar[j];
        grad[lay.inducing_log_var + j] = z_var_bar[j] * state.inducing[j].var;
    }
    grad[lay.log_theta] = theta_bar * kernel.theta;

    // B = L_B L_Bᵀ.
    let lb = state.coreg.factor();
    let lb_bar = (b_bar + b_bar.transpose()) * lb;
    for r in 0..3 {
        for c in 0..=r {
            let idx = lay.l_b + ParamLayout::packed_index(r, c);
            grad[idx] = if r == c { lb_bar[(r, r)] * lb[(r, r)] } else { lb_bar[(r, c)] };
        }
    }
    for k in 0..3 {
        grad[lay.log_gamma + k] = log_gamma_bar[k];
        grad[lay.delta + k] = delta_bar[k];
    }
    Ok((value, Some(grad)))
}

/// Reverse-mode through `Σ = L Lᵀ`: given `∂f/∂L` (lower triangular), returns
/// the symmetric `∂f/∂Σ`, i.e. `L⁻ᵀ sym(Φ(Lᵀ L̄)) L⁻¹` where `Φ` keeps the lower
/// triangle and halves the diagonal.
pub(crate) fn cholesky_backward3(l: &Matrix3<f64>, l_bar: &Matrix3<f64>) -> Matrix3<f64> {
    let mut phi = (l.transpose() * l_bar).lower_triangle();
    for d in 0..3 {
        phi[(d, d)] *= 0.5;
    }
    let sym = (phi + phi.transpose()) * 0.5;
    let l_inv = l
        .solve_lower_triangular(&Matrix3::identity())
        .unwrap_or_else(Matrix3::zeros);
    l_inv.transpose() * sym * l_inv
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: SvgpState,
    pub trace: TrainingTrace,
}

/// Maximizes the ELBO with Adam on random minibatches.
pub fn fit(train_preds: &[GaussianPrediction], targets: &[f64], cfg: &TrainConfig) -> Result<FitOutput> {
    if train_preds.len() != targets.len() {
        return Err(CalibError::invalid("predictions and targets differ in length"));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(CalibError::invalid("non-finite target"));
    }
    let state = init_state(train_preds, cfg)?;
    fit_from(state, train_preds, targets, cfg)
}

/// Continues optimization from an explicit starting state.
pub fn fit_from(
    mut state: SvgpState,
    train_preds: &[GaussianPrediction],
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<FitOutput> {
    cfg.validate()?;
    let n = train_preds.len();
    let m = state.n_inducing();
    let lay = ParamLayout::new(m);
    let mut params = state.to_params();
    let mut adam = AdamState::new(lay.len, cfg.learning_rate);
    let mut rng = RngStream::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let batch_size = cfg.batch_size.min(n);

    for step in 0..cfg.steps {
        let idx = if batch_size == n {
            (0..n).collect()
        } else {
            rng.sample_indices(n, batch_size)
        };
        let batch: Vec<(GaussianPrediction, f64)> = idx.iter().map(|&i| (train_preds[i], targets[i])).collect();
        let noise = McNoise::draw(batch.len(), cfg.mc_samples, &mut rng);
        let (value, grad) = elbo_with_noise(&state, &batch, n, &noise, true)
            .map_err(|e| CalibError::numerical(format!("step {step}: {e}")))?;
        let mut grad = grad.expect("gradient requested");
        if !cfg.optimize_inducing {
            grad[lay.inducing_mu..lay.m_u].iter_mut().for_each(|g| *g = 0.0);
        }
        trace.push((step, value));
        // Adam minimizes; ascend the ELBO.
        grad.iter_mut().for_each(|g| *g = -*g);
        adam.step(&mut params, &grad)
            .map_err(|e| CalibError::numerical(format!("step {step}: {e}")))?;
        state = SvgpState::from_params(m, &params)?;
        if step % 500 == 0 {
            log::debug!("step {step}: elbo {value:.4}");
        }
    }
    Ok(FitOutput { state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::make_grid;
    use crate::optim::finite_diff_grad;

    fn toy_preds(rng: &mut RngStream, n: usize) -> Vec<GaussianPrediction> {
        (0..n).map(|_| GaussianPrediction::new(rng.uniform(-2.0, 2.0), rng.uniform(0.3, 1.5))).collect()
    }

    fn perturbed_state(seed: u64, n_points: usize, m: usize) -> (SvgpState, Vec<(GaussianPrediction, f64)>) {
        let mut rng = RngStream::new(seed);
        let preds = toy_preds(&mut rng, n_points);
        let cfg = TrainConfig { n_inducing: m, ..TrainConfig::synthetic() };
        let mut st = init_state(&preds, &cfg).unwrap();
        let mut p = st.to_params();
        for v in p.iter_mut() {
            *v += 0.1 * rng.standard_normal();
        }
        st = SvgpState::from_params(m, &p).unwrap();
        let batch = preds
            .iter()
            .map(|p| (*p, p.mu + p.std() * rng.uniform(-1.5, 1.5)))
            .collect();
        (st, batch)
    }

    #[test]
    fn init_single_point() {
        let preds = [GaussianPrediction::new(0.0, 1.0)];
        let cfg = TrainConfig { n_inducing: 1, ..TrainConfig::default() };
        let st = init_state(&preds, &cfg).unwrap();
        assert_eq!(st.inducing, vec![GaussianPrediction::new(0.0, 1.0)]);
        assert!(kl_term(&st).unwrap().abs() < 1e-9);
        assert_eq!(st.link, LinkHyper::default());
        assert!(init_state(&preds, &TrainConfig { n_inducing: 2, ..cfg }).is_err());
    }

    #[test]
    fn init_kl_is_zero_and_prior_mean_is_identity() {
        let mut rng = RngStream::new(1);
        let preds = toy_preds(&mut rng, 40);
        let st = init_state(&preds, &TrainConfig { n_inducing: 8, ..TrainConfig::default() }).unwrap();
        assert!(kl_term(&st).unwrap().abs() < 1e-9);
        for marg in q_w_marginal(&st, &preds).unwrap() {
            let p = link_params_from_latent(
                &LatentTriple([marg.mean[0], marg.mean[1], marg.mean[2]]),
                &st.link,
            );
            assert_eq!(p, crate::beta_link::BetaParams::IDENTITY);
        }
    }

    #[test]
    fn kl_quadratic_term_only() {
        let mut rng = RngStream::new(2);
        let preds = toy_preds(&mut rng, 10);
        let mut st = init_state(&preds, &TrainConfig { n_inducing: 3, ..TrainConfig::default() }).unwrap();
        st.m_u = (0..9).map(|_| rng.standard_normal()).collect();
        let cu = prior_covariance(&st.inducing, &st.kernel, &st.coreg.matrix());
        let mu = DVector::from_column_slice(&st.m_u);
        let expected = 0.5 * mu.dot(&cu.lu().solve(&mu).unwrap());
        let got = kl_term(&st).unwrap();
        assert!((got - expected).abs() < 1e-8 * expected.max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn kl_nonnegative_under_perturbation() {
        for seed in 0..20 {
            let (st, _) = perturbed_state(seed, 6, 2);
            assert!(kl_term(&st).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn marginals_recover_prior_at_inducing_inputs() {
        let mut rng = RngStream::new(3);
        let preds = toy_preds(&mut rng, 4);
        let mut st = init_state(&preds, &TrainConfig { n_inducing: 4, ..TrainConfig::default() }).unwrap();
        st.inducing = preds.clone();
        let chol = factor_prior(prior_covariance(&preds, &st.kernel, &st.coreg.matrix())).unwrap();
        st.l_u = lower_to_packed(&chol.l());
        let b = st.coreg.matrix();
        for (marg, p) in q_w_marginal(&st, &preds).unwrap().iter().zip(&preds) {
            assert!(marg.mean.norm() < 1e-12);
            let prior = b * kernel_eval(p, p, &st.kernel);
            assert!((marg.cov - prior).abs().max() < 1e-10);
        }
    }

    #[test]
    fn marginals_far_from_inducing_are_prior() {
        let mut rng = RngStream::new(4);
        let preds = toy_preds(&mut rng, 10);
        let (mut st, _) = perturbed_state(4, 10, 3);
        st.kernel.theta = 0.5;
        let far = GaussianPrediction::new(1e3, 0.5);
        let marg = q_w_marginal(&st, &[far]).unwrap()[0];
        let prior = st.coreg.matrix() * kernel_eval(&far, &far, &st.kernel);
        assert!(marg.mean.norm() < 1e-10);
        assert!((marg.cov - prior).abs().max() < 1e-10);
        let _ = preds;
    }

    #[test]
    fn marginals_match_dense_oracle() {
        let (st, batch) = perturbed_state(5, 3, 2);
        let preds: Vec<GaussianPrediction> = batch.iter().map(|b| b.0).collect();
        let b = st.coreg.matrix();
        // Full 3n×3n expression, formed densely.
        let cu = prior_covariance(&st.inducing, &st.kernel, &b);
        let kwu = DMatrix::from_fn(3, 2, |i, j| kernel_eval(&preds[i], &st.inducing[j], &st.kernel));
        let cwu = kron_with(&kwu, &b);
        let c = kron_with(&DMatrix::from_fn(3, 3, |i, j| kernel_eval(&preds[i], &preds[j], &st.kernel)), &b);
        let a = &cwu * cu.clone().try_inverse().unwrap();
        let lu = st.l_u_matrix();
        let vu = &lu * lu.transpose();
        let vw = &c + &a * (&vu - &cu) * a.transpose();
        let mw = &a * DVector::from_column_slice(&st.m_u);
        for (i, marg) in q_w_marginal(&st, &preds).unwrap().iter().enumerate() {
            for r in 0..3 {
                assert!((marg.mean[r] - mw[3 * i + r]).abs() < 1e-10);
                for cc in 0..3 {
                    assert!((marg.cov[(r, cc)] - vw[(3 * i + r, 3 * i + cc)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        let mut rng = RngStream::new(9);
        let a = Matrix3::from_fn(|_, _| rng.standard_normal());
        let sigma = a * a.transpose() + Matrix3::identity();
        let weights = Matrix3::from_fn(|_, _| rng.standard_normal()).lower_triangle();
        let f = |s: &Matrix3<f64>| s.cholesky().unwrap().l().component_mul(&weights).sum();
        let l = sigma.cholesky().unwrap().l();
        let g = cholesky_backward3(&l, &weights);
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..=r {
                // symmetric perturbation of both (r, c) and (c, r)
                let mut e = Matrix3::zeros();
                e[(r, c)] = h;
                e[(c, r)] = h;
                let fd = (f(&(sigma + e)) - f(&(sigma - e))) / (2.0 * h);
                let an = if r == c { g[(r, c)] } else { g[(r, c)] + g[(c, r)] };
                assert!((fd - an).abs() < 1e-6, "{r},{c}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        for seed in [11u64, 12] {
            let (st, batch) = perturbed_state(seed, 5, 2);
            let mut rng = RngStream::new(seed);
            let noise = McNoise::draw(batch.len(), 4, &mut rng);
            let (_, grad) = elbo_with_noise(&st, &batch, 5, &noise, true).unwrap();
            let grad = grad.unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let s = SvgpState::from_params(2, p).unwrap();
                    elbo_with_noise(&s, &batch, 5, &noise, false).unwrap().0
                },
                &st.to_params(),
                1e-5,
            );
            for (k, (a, n)) in grad.iter().zip(&fd).enumerate() {
                assert!((a - n).abs() / n.abs().max(1.0) < 1e-3, "param {k}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn elbo_scales_with_n_total() {
        let (st, batch) = perturbed_state(6, 5, 2);
        let noise = McNoise::draw(5, 3, &mut RngStream::new(1));
        let kl = kl_term(&st).unwrap();
        let e1 = elbo_with_noise(&st, &batch, 5, &noise, false).unwrap().0;
        let e2 = elbo_with_noise(&st, &batch, 10, &noise, false).unwrap().0;
        assert!(((e2 + kl) - 2.0 * (e1 + kl)).abs() < 1e-9 * (e1 + kl).abs().max(1.0));
    }

    #[test]
    fn large_gamma_collapses_to_base_likelihood() {
        let (mut st, batch) = perturbed_state(7, 5, 2);
        st.link = LinkHyper { gamma: [1e6; 3], delta: [0.0; 3] };
        let base: f64 = batch.iter().map(|(p, y)| p.log_pdf(*y)).sum();
        let kl = kl_term(&st).unwrap();
        let e = elbo(&st, &batch, 5, 16, &mut RngStream::new(2)).unwrap();
        assert!((e - (base - kl)).abs() < 1e-3, "{e} vs {}", base - kl);
    }

    #[test]
    fn vanishing_posterior_variance_gives_identity_likelihood() {
        let mut rng = RngStream::new(8);
        let preds = toy_preds(&mut rng, 5);
        let batch: Vec<_> = preds.iter().map(|p| (*p, p.mu + 0.3 * p.std())).collect();
        let mut st = init_state(&preds, &TrainConfig { n_inducing: 5, ..TrainConfig::default() }).unwrap();
        st.inducing = preds.clone();
        st.l_u = lower_to_packed(&(DMatrix::identity(15, 15) * 1e-6));
        let oracle: f64 = batch.iter().map(|(p, y)| p.log_pdf(*y)).sum::<f64>() - kl_term(&st).unwrap();
        let e1 = elbo(&st, &batch, 5, 1, &mut RngStream::new(3)).unwrap();
        let e2 = elbo(&st, &batch, 5, 10_000, &mut RngStream::new(3)).unwrap();
        assert!((e1 - oracle).abs() < 1e-2, "{e1} vs {oracle}");
        assert!((e2 - oracle).abs() < 1e-2, "{e2} vs {oracle}");
    }

    #[test]
    fn param_roundtrip() {
        let (st, _) = perturbed_state(10, 6, 3);
        let back = SvgpState::from_params(3, &st.to_params()).unwrap();
        for (a, b) in st.to_params().iter().zip(back.to_params()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_collapse_prediction() {
        let (mut st, _) = perturbed_state(13, 6, 3);
        st.link = LinkHyper { gamma: [1e6; 3], delta: [0.0; 3] };
        let pred = GaussianPrediction::new(0.4, 0.8);
        let ys = make_grid(&[pred], 1024, 8.0).unwrap();
        let d = predict_density(&st, &pred, &ys, 32, &mut RngStream::new(0)).unwrap();
        d.check_invariants().unwrap();
        let sup = ys.iter().zip(d.pdf()).map(|(&y, p)| (p - pred.pdf(y)).abs()).fold(0.0, f64::max);
        assert!(sup < 1e-3);
        let q_grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let map = predict_calibration_map(&st, &pred, &q_grid, 32, &mut RngStream::new(0)).unwrap();
        for (q, c) in q_grid.iter().zip(&map) {
            assert!((q - c).abs() < 1e-3);
        }
    }

    #[test]
    fn predicted_maps_monotone_and_densities_valid() {
        let (st, _) = perturbed_state(14, 8, 3);
        let pred = GaussianPrediction::new(-0.5, 0.6);
        let q_grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let map = predict_calibration_map(&st, &pred, &q_grid, 64, &mut RngStream::new(1)).unwrap();
        assert!(map.windows(2).all(|w| w[1] >= w[0]));
        let ys = make_grid(&[pred], 4096, 8.0).unwrap();
        let d = predict_density(&st, &pred, &ys, 64, &mut RngStream::new(1)).unwrap();
        d.check_invariants().unwrap();
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = RngStream::new(15);
        let preds = toy_preds(&mut rng, 30);
        let ys: Vec<f64> = preds.iter().map(|p| p.mu + p.std() * rng.standard_normal()).collect();
        let cfg = TrainConfig { n_inducing: 4, batch_size: 16, mc_samples: 8, steps: 30, ..TrainConfig::synthetic() };
        let a = fit(&preds, &ys, &cfg).unwrap();
        let b = fit(&preds, &ys, &cfg).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 30);
    }

    #[test]
    fn frozen_inducing_inputs_stay_put() {
        let mut rng = RngStream::new(16);
        let preds = toy_preds(&mut rng, 20);
        let ys: Vec<f64> = preds.iter().map(|p| p.mu + p.std() * rng.standard_normal()).collect();
        let cfg = TrainConfig {
            n_inducing: 3,
            batch_size: 8,
            mc_samples: 4,
            steps: 10,
            optimize_inducing: false,
            ..TrainConfig::synthetic()
        };
        let init = init_state(&preds, &cfg).unwrap();
        let out = fit(&preds, &ys, &cfg).unwrap();
        for (a, b) in init.inducing.iter().zip(&out.state.inducing) {
            assert!((a.mu - b.mu).abs() < 1e-12 && (a.var - b.var).abs() < 1e-12 * a.var);
        }
    }
}
