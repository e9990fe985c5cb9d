//! Quantile recalibration baseline: empirical CDF frequencies of the training
//! quantiles, a least-squares isotonic fit by pool-adjacent-violators, and a
//! piecewise-linear map applied to base CDFs.

use serde::{Deserialize, Serialize};

use crate::dist::{GaussianPrediction, GridDistribution};
use crate::error::{CalibError, Result};

/// Monotone piecewise-linear map given by its knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    pub knot_x: Vec<f64>,
    pub knot_y: Vec<f64>,
}

impl IsotonicMap {
    pub fn identity() -> Self {
        IsotonicMap {
            knot_x: vec![0.0, 1.0],
            knot_y: vec![0.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nondecreasing = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
        if self.knot_x.is_empty() || self.knot_x.len() != self.knot_y.len() {
            return Err(CalibError::invalid("isotonic map needs equally many x and y knots"));
        }
        if self.knot_x.iter().chain(&self.knot_y).any(|v| !v.is_finite()) {
            return Err(CalibError::invalid("isotonic map has non-finite knots"));
        }
        if !nondecreasing(&self.knot_x) || !nondecreasing(&self.knot_y) {
            return Err(CalibError::invalid("isotonic map knots must be nondecreasing"));
        }
        if self.knot_x.iter().chain(&self.knot_y).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CalibError::invalid("isotonic map knots must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Segment index `k` with `knot_x[k] <= q < knot_x[k+1]`, if any.
    fn segment(&self, q: f64) -> Option<usize> {
        let n = self.knot_x.len();
        if n < 2 || q < self.knot_x[0] || q >= self.knot_x[n - 1] {
            return None;
        }
        Some(self.knot_x.partition_point(|&x| x <= q) - 1)
    }

    /// Unclamped interpolation with constant extrapolation.
    pub fn interpolate(&self, q: f64) -> f64 {
        let n = self.knot_x.len();
        if q <= self.knot_x[0] {
            return self.knot_y[0];
        }
        if q >= self.knot_x[n - 1] {
            return self.knot_y[n - 1];
        }
        let k = self.segment(q).expect("q lies strictly inside the knot range");
        let (x0, x1) = (self.knot_x[k], self.knot_x[k + 1]);
        let (y0, y1) = (self.knot_y[k], self.knot_y[k + 1]);
        if x1 == x0 {
            return y1;
        }
        y0 + (q - x0) / (x1 - x0) * (y1 - y0)
    }

    /// Slope of the interpolant at `q` (right derivative; zero outside the knots).
    pub fn slope(&self, q: f64) -> f64 {
        match self.segment(q) {
            Some(k) if self.knot_x[k + 1] > self.knot_x[k] => {
                (self.knot_y[k + 1] - self.knot_y[k]) / (self.knot_x[k + 1] - self.knot_x[k])
            }
            _ => 0.0,
        }
    }
}

/// `τ̄ᵢ = (1/n) Σⱼ 1[τⱼ ≤ τᵢ]`.
pub fn empirical_frequencies(taus: &[f64]) -> Result<Vec<f64>> {
    if taus.is_empty() {
        return Err(CalibError::invalid("no quantiles given"));
    }
    if let Some(bad) = taus.iter().find(|t| !(**t >= 0.0 && **t <= 1.0)) {
        return Err(CalibError::invalid(format!("quantile {bad} outside [0, 1]")));
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = taus.len() as f64;
    Ok(taus
        .iter()
        .map(|t| sorted.partition_point(|s| s <= t) as f64 / n)
        .collect())
}

/// Least-squares nondecreasing fit to `ys` (unit weights), by pool-adjacent-violators.
pub fn isotonic_least_squares(ys: &[f64]) -> Vec<f64> {
    isotonic_weighted(ys, &vec![1.0; ys.len()])
}

fn isotonic_weighted(ys: &[f64], ws: &[f64]) -> Vec<f64> {
    // Each block: (weighted mean, total weight, number of points).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(ys.len());
    for (&y, &w) in ys.iter().zip(ws) {
        let mut cur = (y, w, 1usize);
        while let Some(&prev) = blocks.last() {
            if prev.0 <= cur.0 {
                break;
            }
            blocks.pop();
            let total = prev.1 + cur.1;
            cur = ((prev.0 * prev.1 + cur.0 * cur.1) / total, total, prev.2 + cur.2);
        }
        blocks.push(cur);
    }
    blocks
        .into_iter()
        .flat_map(|(v, _, count)| std::iter::repeat(v).take(count))
        .collect()
}

/// Isotonic regression of `ys` on sorted `xs`, returned as a piecewise-linear map.
///
/// Tied `xs` are pooled first; interior knots of constant runs are dropped.
pub fn pav_fit(xs: &[f64], ys: &[f64]) -> Result<IsotonicMap> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(CalibError::invalid("pav_fit needs equally many, nonzero xs and ys"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(CalibError::invalid("pav_fit inputs must be finite"));
    }
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(CalibError::invalid("pav_fit requires xs sorted ascending"));
    }
    let mut ux: Vec<f64> = Vec::new();
    let mut uy: Vec<f64> = Vec::new();
    let mut uw: Vec<f64> = Vec::new();
    for (&x, &y) in xs.iter().zip(ys) {
        match ux.last() {
            Some(&last) if last == x => {
                let k = uy.len() - 1;
                uy[k] = (uy[k] * uw[k] + y) / (uw[k] + 1.0);
                uw[k] += 1.0;
            }
            _ => {
                ux.push(x);
                uy.push(y);
                uw.push(1.0);
            }
        }
    }
    let fitted = isotonic_weighted(&uy, &uw);
    let mut knot_x = Vec::with_capacity(ux.len());
    let mut knot_y = Vec::with_capacity(ux.len());
    for i in 0..ux.len() {
        let interior = i > 0 && i + 1 < ux.len() && fitted[i - 1] == fitted[i] && fitted[i + 1] == fitted[i];
        if !interior {
            knot_x.push(ux[i]);
            knot_y.push(fitted[i]);
        }
    }
    Ok(IsotonicMap { knot_x, knot_y })
}

/// Interpolated map value at `q`, constant outside the knots, clamped to `[0, 1]`.
pub fn apply_map(m: &IsotonicMap, q: f64) -> f64 {
    m.interpolate(q).clamp(0.0, 1.0)
}

/// Fits the quantile recalibration map from training PIT values `τᵢ = F_i(yᵢ)`.
///
/// The map is pinned at `(0, 0)` and `(1, 1)` so it covers the whole unit
/// interval; between the extreme training quantiles and the pins it is linear.
pub fn fit_quantile_recalibration(taus: &[f64]) -> Result<IsotonicMap> {
    let freqs = empirical_frequencies(taus)?;
    let mut pairs: Vec<(f64, f64)> = taus.iter().copied().zip(freqs).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut xs = Vec::with_capacity(pairs.len() + 2);
    let mut ys = Vec::with_capacity(pairs.len() + 2);
    xs.push(0.0);
    ys.push(0.0);
    for (x, y) in pairs {
        xs.push(x);
        ys.push(y);
    }
    xs.push(1.0);
    ys.push(1.0);
    pav_fit(&xs, &ys)
}

/// Base Gaussian recalibrated by `m`: density is the map slope at the base
/// CDF times the base density, renormalized on the grid.
pub fn calibrate_distribution_iso(m: &IsotonicMap, pred: &GaussianPrediction, ys: &[f64]) -> Result<GridDistribution> {
    m.validate()?;
    let pdf = ys.iter().map(|&y| m.slope(pred.cdf(y)) * pred.pdf(y)).collect();
    GridDistribution::from_pdf(ys.to_vec(), pdf)
}
