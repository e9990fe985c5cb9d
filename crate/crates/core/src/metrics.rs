//! Evaluation of grid predictive distributions: NLL, MSE of the mean,
//! pinball loss over a quantile ladder, and quantile coverage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dist::GridDistribution;
use crate::error::{CalibError, Result};

/// Densities below this are floored before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Number of quantile levels in the evaluation ladder.
pub const LADDER_LEN: usize = 19;

/// `{0.05, 0.10, …, 0.95}`.
pub fn quantile_ladder() -> Vec<f64> {
    (1..=LADDER_LEN).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub mse: f64,
    pub pbl: f64,
    /// `(τ, fraction of targets ≤ predicted τ-quantile)` along the ladder.
    pub coverage: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn max_coverage_error(&self) -> f64 {
        self.coverage.iter().map(|(t, c)| (c - t).abs()).fold(0.0, f64::max)
    }

    /// Flat key-value form: `nll`, `mse`, `pbl`, `max_coverage_error`, `coverage_0.05`, ….
    pub fn to_flat_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("nll".into(), self.nll.into());
        m.insert("mse".into(), self.mse.into());
        m.insert("pbl".into(), self.pbl.into());
        m.insert("max_coverage_error".into(), self.max_coverage_error().into());
        for (t, c) in &self.coverage {
            m.insert(format!("coverage_{t:.2}"), (*c).into());
        }
        Value::Object(m)
    }

    /// Largest absolute difference over all scalar metrics and coverage levels.
    pub fn max_abs_diff(&self, other: &EvalReport) -> f64 {
        let mut d = (self.nll - other.nll)
            .abs()
            .max((self.mse - other.mse).abs())
            .max((self.pbl - other.pbl).abs());
        for ((_, a), (_, b)) in self.coverage.iter().zip(&other.coverage) {
            d = d.max((a - b).abs());
        }
        d
    }
}

fn check_lengths(dists: &[GridDistribution], ys: &[f64]) -> Result<()> {
    if dists.len() != ys.len() {
        return Err(CalibError::invalid(format!(
            "{} distributions but {} targets",
            dists.len(),
            ys.len()
        )));
    }
    if dists.is_empty() {
        return Err(CalibError::invalid("nothing to evaluate"));
    }
    Ok(())
}

fn point_nll(i: usize, d: &GridDistribution, y: f64) -> Result<f64> {
    let p = d.pdf_at(y).ok_or_else(|| {
        let ys = d.ys();
        CalibError::invalid(format!(
            "instance {i}: target {y} outside grid [{}, {}]",
            ys[0],
            ys[ys.len() - 1]
        ))
    })?;
    Ok(-p.max(DENSITY_FLOOR).ln())
}

/// Mean negative log density of the targets, in nats.
pub fn nll(dists: &[GridDistribution], ys: &[f64]) -> Result<f64> {
    check_lengths(dists, ys)?;
    let per: Vec<f64> = dists
        .par_iter()
        .zip(ys.par_iter())
        .enumerate()
        .map(|(i, (d, &y))| point_nll(i, d, y))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Trapezoid approximation of `∫ y p(y) dy`.
pub fn expected_value(d: &GridDistribution) -> f64 {
    let (ys, pdf) = (d.ys(), d.pdf());
    ys.windows(2)
        .zip(pdf.windows(2))
        .map(|(y, p)| 0.5 * (y[1] - y[0]) * (y[0] * p[0] + y[1] * p[1]))
        .sum()
}

/// Smallest `y` with interpolated `CDF(y) ≥ τ`.
pub fn quantile_from_cdf(d: &GridDistribution, tau: f64) -> Result<f64> {
    let (ys, cdf) = (d.ys(), d.cdf());
    if !(tau >= cdf[0] && tau <= cdf[cdf.len() - 1]) {
        return Err(CalibError::invalid(format!(
            "quantile level {tau} outside achieved CDF range [{}, {}]",
            cdf[0],
            cdf[cdf.len() - 1]
        )));
    }
    let k = cdf.partition_point(|&c| c < tau);
    if k == 0 {
        return Ok(ys[0]);
    }
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    Ok(ys[k - 1] + (tau - c0) / (c1 - c0) * (ys[k] - ys[k - 1]))
}

/// Pinball loss of quantile prediction `g` for target `y` at level `tau`.
pub fn pinball(y: f64, g: f64, tau: f64) -> f64 {
    if y < g {
        (1.0 - tau) * (g - y)
    } else {
        tau * (y - g)
    }
}

struct PointScores {
    nll: f64,
    sq_err: f64,
    pinball: Vec<f64>,
    covered: Vec<bool>,
}

fn score_point(i: usize, d: &GridDistribution, y: f64, ladder: &[f64]) -> Result<PointScores> {
    let nll = point_nll(i, d, y)?;
    let mean = expected_value(d);
    let mut pinball_vals = Vec::with_capacity(ladder.len());
    let mut covered = Vec::with_capacity(ladder.len());
    for &tau in ladder {
        let g = quantile_from_cdf(d, tau).map_err(|e| CalibError::invalid(format!("instance {i}: {e}")))?;
        pinball_vals.push(pinball(y, g, tau));
        covered.push(y <= g);
    }
    Ok(PointScores {
        nll,
        sq_err: (y - mean).powi(2),
        pinball: pinball_vals,
        covered,
    })
}

/// Full report on a test set; per-instance work runs in parallel, reductions in index order.
pub fn evaluate(dists: &[GridDistribution], ys: &[f64]) -> Result<EvalReport> {
    check_lengths(dists, ys)?;
    let ladder = quantile_ladder();
    let scores: Vec<PointScores> = dists
        .par_iter()
        .zip(ys.par_iter())
        .enumerate()
        .map(|(i, (d, &y))| score_point(i, d, y, &ladder))
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let nll = scores.iter().map(|s| s.nll).sum::<f64>() / n;
    let mse = scores.iter().map(|s| s.sq_err).sum::<f64>() / n;
    let pbl = scores.iter().map(|s| s.pinball.iter().sum::<f64>()).sum::<f64>() / (n * ladder.len() as f64);
    let coverage = ladder
        .iter()
        .enumerate()
        .map(|(k, &tau)| (tau, scores.iter().filter(|s| s.covered[k]).count() as f64 / n))
        .collect();
    Ok(EvalReport { nll, mse, pbl, coverage })
}
