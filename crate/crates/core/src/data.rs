//! Synthetic data and CSV input/output.
//!
//! Feature CSVs have a header row and put the target in the last column.
//! Prediction CSVs have the columns `mu`, `var`, `y`.

use std::path::Path;

use nalgebra::DMatrix;

use crate::dist::{Dataset, GaussianPrediction, RngStream};
use crate::error::{CalibError, Result};

pub const SYNTHETIC_DEFAULT_N: usize = 360;
pub const SYNTHETIC_X_RANGE: (f64, f64) = (-10.0, 40.0);
pub const SYNTHETIC_SLOPE: f64 = 0.5;
pub const SYNTHETIC_NOISE_SD: f64 = std::f64::consts::SQRT_2;

/// Synthetic set together with the mixture branch of each row (`true` = sloped branch).
#[derive(Debug, Clone)]
pub struct LabeledSynthetic {
    pub data: Dataset,
    pub sloped: Vec<bool>,
}

/// Equal mixture of `y = 0.5x + ε` and `y = ε`, `x ~ U[-10, 40]`, `ε ~ N(0, 2)`.
pub fn gen_synthetic(n: usize, rng: &mut RngStream) -> Result<Dataset> {
    Ok(gen_synthetic_labeled(n, rng)?.data)
}

pub fn gen_synthetic_labeled(n: usize, rng: &mut RngStream) -> Result<LabeledSynthetic> {
    if n < 2 {
        return Err(CalibError::invalid("synthetic set needs at least 2 points"));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut sloped = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform(SYNTHETIC_X_RANGE.0, SYNTHETIC_X_RANGE.1);
        let branch = rng.bernoulli(0.5);
        let eps = SYNTHETIC_NOISE_SD * rng.standard_normal();
        xs.push(x);
        ys.push(if branch { SYNTHETIC_SLOPE * x + eps } else { eps });
        sloped.push(branch);
    }
    let data = Dataset::new(DMatrix::from_column_slice(n, 1, &xs), ys)?;
    Ok(LabeledSynthetic { data, sloped })
}

fn parse_field(field: &str, line: u64, column: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CalibError::invalid(format!("line {line}: column {column}: cannot parse {field:?} as a finite number")))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads a header-plus-rows CSV; the last column is the target.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(CalibError::invalid(format!(
            "{}: need at least one feature column and a target column",
            path.display()
        )));
    }
    let d = headers.len() - 1;
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != headers.len() {
            return Err(CalibError::invalid(format!(
                "line {line}: expected {} fields, found {}",
                headers.len(),
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v = parse_field(field, line, &headers[j])?;
            if j < d {
                feats.push(v);
            } else {
                targets.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(CalibError::invalid(format!("{}: no data rows", path.display())));
    }
    let n = targets.len();
    Dataset::new(DMatrix::from_row_slice(n, d, &feats), targets)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.n_features()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.targets()[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `mu,var,y` rows; columns are matched by header name.
pub fn load_predictions_csv(path: &Path) -> Result<(Vec<GaussianPrediction>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CalibError::invalid(format!("{}: missing column {name:?}", path.display())))
    };
    let (i_mu, i_var, i_y) = (col("mu")?, col("var")?, col("y")?);
    let mut preds = Vec::new();
    let mut ys = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let get = |i: usize, name: &str| {
            rec.get(i)
                .ok_or_else(|| CalibError::invalid(format!("line {line}: missing field {name}")))
                .and_then(|f| parse_field(f, line, name))
        };
        let (mu, var, y) = (get(i_mu, "mu")?, get(i_var, "var")?, get(i_y, "y")?);
        if var <= 0.0 {
            return Err(CalibError::invalid(format!("line {line}: variance {var} must be positive")));
        }
        preds.push(GaussianPrediction::new(mu, var));
        ys.push(y);
    }
    if preds.is_empty() {
        return Err(CalibError::invalid(format!("{}: no data rows", path.display())));
    }
    Ok((preds, ys))
}

pub fn write_predictions_csv(preds: &[GaussianPrediction], ys: &[f64], path: &Path) -> Result<()> {
    if preds.len() != ys.len() {
        return Err(CalibError::invalid("predictions and targets differ in length"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mu", "var", "y"])?;
    for (p, y) in preds.iter().zip(ys) {
        w.write_record([p.mu.to_string(), p.var.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header and rows of numbers.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
