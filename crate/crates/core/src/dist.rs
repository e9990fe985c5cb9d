//! Shared domain types: Gaussian base predictions, datasets, grid-represented
//! predictive distributions and the seeded random stream.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Lower bound applied to every predictive variance (target units squared).
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Default number of evaluation grid points.
pub const DEFAULT_GRID_SIZE: usize = 4096;

/// Default grid half-width in units of the largest predicted standard deviation.
pub const DEFAULT_GRID_PAD: f64 = 8.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// A Gaussian predictive distribution emitted by a base regressor.
///
/// `var` is a variance, not a standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub var: f64,
}

impl GaussianPrediction {
    /// Builds a prediction, clamping the variance at [`VARIANCE_FLOOR`].
    pub fn new(mu: f64, var: f64) -> Self {
        GaussianPrediction {
            mu,
            var: var.max(VARIANCE_FLOOR),
        }
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.var.is_finite()
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.std();
        -0.5 * z * z - LN_SQRT_2PI - 0.5 * self.var.ln()
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.log_pdf(y).exp()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        standard_normal_cdf((y - self.mu) / self.std())
    }
}

/// Φ(z) for the standard normal, accurate in both tails.
pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// A regression dataset with row-major features and a scalar target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(CalibError::invalid(format!(
                "feature rows ({}) and targets ({}) disagree",
                features.nrows(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(CalibError::invalid("dataset has no rows"));
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(CalibError::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.n_features();
        let features = DMatrix::from_fn(idx.len(), d, |r, c| self.features[(idx[r], c)]);
        let targets = idx.iter().map(|&i| self.targets[i]).collect();
        Dataset::new(features, targets)
    }
}

/// Seeded random stream backed by ChaCha8 (a counter-based stream cipher
/// generator) with a 64-bit seed.
///
/// Child streams share the seed and select a different ChaCha stream id, so
/// per-instance randomness is independent of evaluation order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `id` derived from the same seed.
    pub fn child(&self, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id.wrapping_add(1));
        RngStream {
            seed: self.seed,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.rng);
    }

    /// `amount` distinct indices drawn from `0..len`.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, len, amount.min(len)).into_vec()
    }
}

/// Equally spaced evaluation grid spanning
/// `[min μ − pad·max σ, max μ + pad·max σ]`, endpoints included.
pub fn make_grid(preds: &[GaussianPrediction], grid_size: usize, pad: f64) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(CalibError::invalid("cannot build a grid from zero predictions"));
    }
    if grid_size < 2 {
        return Err(CalibError::invalid("grid needs at least two points"));
    }
    if !(pad > 0.0) {
        return Err(CalibError::invalid("grid pad must be positive"));
    }
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(CalibError::invalid("non-finite prediction"));
    }
    let mu_min = preds.iter().map(|p| p.mu).fold(f64::INFINITY, f64::min);
    let mu_max = preds.iter().map(|p| p.mu).fold(f64::NEG_INFINITY, f64::max);
    let std_max = preds.iter().map(|p| p.std()).fold(0.0, f64::max);
    let lo = mu_min - pad * std_max;
    let hi = mu_max + pad * std_max;
    if !(hi > lo) {
        return Err(CalibError::invalid("degenerate grid span"));
    }
    let step = (hi - lo) / (grid_size - 1) as f64;
    let mut ys: Vec<f64> = (0..grid_size).map(|i| lo + step * i as f64).collect();
    ys[grid_size - 1] = hi;
    Ok(ys)
}

/// Trapezoid quadrature of `vals` sampled at `ys`.
pub fn trapezoid_integral(ys: &[f64], vals: &[f64]) -> Result<f64> {
    if ys.len() != vals.len() {
        return Err(CalibError::invalid(format!(
            "trapezoid: {} abscissae but {} values",
            ys.len(),
            vals.len()
        )));
    }
    Ok(ys
        .windows(2)
        .zip(vals.windows(2))
        .map(|(y, v)| 0.5 * (y[1] - y[0]) * (v[0] + v[1]))
        .sum())
}

fn cumulative_trapezoid(ys: &[f64], vals: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ys.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..ys.len() {
        acc += 0.5 * (ys[i] - ys[i - 1]) * (vals[i] + vals[i - 1]);
        out.push(acc);
    }
    out
}

/// Random partition into `⌈fraction·n⌉` and the remaining rows.
pub fn train_test_split(
    ds: &Dataset,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CalibError::invalid("split fraction must lie in (0, 1)"));
    }
    let n = ds.len();
    let n_train = (fraction * n as f64).ceil() as usize;
    if n_train == 0 || n_train >= n {
        return Err(CalibError::invalid(format!(
            "split of {n} rows at {fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok((ds.select(&idx[..n_train])?, ds.select(&idx[n_train..])?))
}

/// A predictive distribution tabulated on a shared, strictly increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDistribution {
    ys: Vec<f64>,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridDistribution {
    /// Tabulates a density, deriving the CDF by cumulative trapezoid.
    ///
    /// Mass lying outside the grid is folded back in by renormalizing both
    /// PDF and CDF with the trapezoid total, so the result always integrates
    /// to one on the grid.
    pub fn from_pdf(ys: Vec<f64>, pdf: Vec<f64>) -> Result<Self> {
        if ys.len() != pdf.len() {
            return Err(CalibError::invalid("grid and pdf lengths differ"));
        }
        if ys.len() < 2 {
            return Err(CalibError::invalid("grid needs at least two points"));
        }
        if ys.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CalibError::invalid("grid is not strictly increasing"));
        }
        if pdf.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CalibError::numerical("pdf has negative or non-finite values"));
        }
        let mut cdf = cumulative_trapezoid(&ys, &pdf);
        let total = *cdf.last().unwrap();
        if !(total > 0.0) {
            return Err(CalibError::numerical("pdf has zero mass on the grid"));
        }
        if (total - 1.0).abs() > 1e-2 {
            log::debug!("density mass on grid is {total:.4} before renormalization");
        }
        let mut pdf = pdf;
        pdf.iter_mut().for_each(|p| *p /= total);
        cdf.iter_mut().for_each(|c| *c = (*c / total).min(1.0));
        Ok(GridDistribution { ys, pdf, cdf })
    }

    /// Base Gaussian tabulated on `ys`.
    pub fn from_gaussian(pred: &GaussianPrediction, ys: &[f64]) -> Result<Self> {
        let pdf = ys.iter().map(|&y| pred.pdf(y)).collect();
        Self::from_pdf(ys.to_vec(), pdf)
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn pdf(&self) -> &[f64] {
        &self.pdf
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Index `k` with `ys[k] <= y <= ys[k+1]`, or `None` outside the grid.
    fn bracket(&self, y: f64) -> Option<usize> {
        let n = self.ys.len();
        if !(y >= self.ys[0] && y <= self.ys[n - 1]) {
            return None;
        }
        let k = self.ys.partition_point(|&g| g <= y);
        Some(k.saturating_sub(1).min(n - 2))
    }

    /// Density at `y` by linear interpolation; `None` outside the grid.
    pub fn pdf_at(&self, y: f64) -> Option<f64> {
        let k = self.bracket(y)?;
        let t = (y - self.ys[k]) / (self.ys[k + 1] - self.ys[k]);
        Some(self.pdf[k] + t * (self.pdf[k + 1] - self.pdf[k]))
    }

    /// Checks the type invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<()> {
        let total = trapezoid_integral(&self.ys, &self.pdf)?;
        if (total - 1.0).abs() > 1e-3 {
            return Err(CalibError::numerical(format!("pdf integrates to {total}")));
        }
        if self.cdf.windows(2).any(|w| w[1] < w[0]) {
            return Err(CalibError::numerical("cdf decreases"));
        }
        if *self.cdf.last().unwrap() < 1.0 - 1e-3 {
            return Err(CalibError::numerical("cdf does not reach one"));
        }
        for i in 1..self.ys.len() {
            let cell = 0.5 * (self.ys[i] - self.ys[i - 1]) * (self.pdf[i] + self.pdf[i - 1]);
            if ((self.cdf[i] - self.cdf[i - 1]) - cell).abs() > 1e-6 {
                return Err(CalibError::numerical(format!("cdf inconsistent at cell {i}")));
            }
        }
        Ok(())
    }
}
