//! End-to-end experiment pipeline and the on-disk calibrator format.
//!
//! A run loads or generates data, splits it, fits a base regressor, fits each
//! requested calibrator on the training split only and evaluates everything
//! on the test split. Artifacts written to the output directory:
//!
//! - `config.json`: the resolved configuration
//! - `report.json`: flat metrics per method plus calibration-map deviations
//! - `trace.csv`: GP-Beta training ELBO per step
//! - `density_<k>.csv`: grid densities for selected test points, one column per method
//! - `map_<k>.csv`: mean calibration maps for the same points
//! - `model_<method>.json`: fitted calibrators
//! - `export_points.csv`: the selected test points

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::base::{bayes_ridge_fit_with, bayes_ridge_predict, ols_fit, ols_predict, BayesRidgeConfig};
use crate::data::{gen_synthetic, load_csv, load_predictions_csv, write_table, SYNTHETIC_DEFAULT_N};
use crate::dist::{
    make_grid, train_test_split, Dataset, GaussianPrediction, GridDistribution, RngStream, DEFAULT_GRID_PAD,
    DEFAULT_GRID_SIZE,
};
use crate::error::{CalibError, Result};
use crate::isotonic::{apply_map, calibrate_distribution_iso, fit_quantile_recalibration, IsotonicMap};
use crate::metrics::{evaluate, EvalReport};
use crate::svgp::{fit, SvgpState, TrainConfig, TrainingTrace, DEFAULT_PREDICT_SAMPLES};

const STREAM_DATA: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_PREDICT: u64 = 1 << 32;
const STREAM_MAP: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic { n: usize },
    /// Feature CSV, target in the last column.
    Csv { path: PathBuf },
    /// Precomputed `mu,var,y` predictions from an external base model.
    Predictions { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseModelKind {
    Ols,
    BayesRidge,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibratorKind {
    None,
    Iso,
    GpBeta,
}

impl CalibratorKind {
    pub fn name(self) -> &'static str {
        match self {
            CalibratorKind::None => "none",
            CalibratorKind::Iso => "iso",
            CalibratorKind::GpBeta => "gp-beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(CalibratorKind::None),
            "iso" => Ok(CalibratorKind::Iso),
            "gp-beta" => Ok(CalibratorKind::GpBeta),
            other => Err(CalibError::invalid(format!("unknown calibrator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub base: BaseModelKind,
    pub calibrators: Vec<CalibratorKind>,
    pub train: TrainConfig,
    pub grid_size: usize,
    pub pad: f64,
    /// Fraction of rows used for training.
    pub split: f64,
    /// Master seed; also replaces `train.seed`.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Monte-Carlo draws per test density.
    pub predict_samples: usize,
    /// Monte-Carlo draws per exported calibration map.
    pub map_samples: usize,
    /// Interior quantile levels per exported calibration map.
    pub map_points: usize,
    /// Number of test points whose densities and maps are exported.
    pub export_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Synthetic { n: SYNTHETIC_DEFAULT_N },
            base: BaseModelKind::Ols,
            calibrators: vec![CalibratorKind::Iso, CalibratorKind::GpBeta],
            train: TrainConfig::synthetic(),
            grid_size: DEFAULT_GRID_SIZE,
            pad: DEFAULT_GRID_PAD,
            split: 0.75,
            seed: 0,
            out_dir: None,
            predict_samples: DEFAULT_PREDICT_SAMPLES,
            map_samples: DEFAULT_PREDICT_SAMPLES,
            map_points: 199,
            export_points: 3,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        let external_source = matches!(self.source, DataSource::Predictions { .. });
        if external_source != (self.base == BaseModelKind::External) {
            return Err(CalibError::invalid(
                "external predictions go with base model \"external\" and only with it",
            ));
        }
        if self.calibrators.contains(&CalibratorKind::GpBeta) {
            self.train.validate()?;
        }
        if self.grid_size < 2 || !(self.pad > 0.0) {
            return Err(CalibError::invalid("grid needs at least 2 points and positive padding"));
        }
        if self.predict_samples == 0 || self.map_samples == 0 || self.map_points == 0 {
            return Err(CalibError::invalid("sample and map-point counts must be positive"));
        }
        Ok(())
    }

    /// Interior quantile levels `k / (map_points + 1)`.
    pub fn q_grid(&self) -> Vec<f64> {
        (1..=self.map_points).map(|k| k as f64 / (self.map_points + 1) as f64).collect()
    }
}

/// A fitted calibrator as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Calibrator {
    None,
    Iso { map: IsotonicMap },
    GpBeta { state: SvgpState },
}

pub const MODEL_FORMAT: &str = "distcal-calibrator";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    calibrator: Calibrator,
}

impl Calibrator {
    pub fn kind(&self) -> CalibratorKind {
        match self {
            Calibrator::None => CalibratorKind::None,
            Calibrator::Iso { .. } => CalibratorKind::Iso,
            Calibrator::GpBeta { .. } => CalibratorKind::GpBeta,
        }
    }

    /// Fits on training predictions and targets; GP-Beta also returns its trace.
    pub fn fit(
        kind: CalibratorKind,
        preds: &[GaussianPrediction],
        ys: &[f64],
        train: &TrainConfig,
    ) -> Result<(Calibrator, Option<TrainingTrace>)> {
        if preds.len() != ys.len() || preds.is_empty() {
            return Err(CalibError::invalid("calibration needs equally many, nonzero predictions and targets"));
        }
        match kind {
            CalibratorKind::None => Ok((Calibrator::None, None)),
            CalibratorKind::Iso => {
                let taus: Vec<f64> = preds.iter().zip(ys).map(|(p, &y)| p.cdf(y)).collect();
                Ok((Calibrator::Iso { map: fit_quantile_recalibration(&taus)? }, None))
            }
            CalibratorKind::GpBeta => {
                let out = fit(preds, ys, train)?;
                Ok((Calibrator::GpBeta { state: out.state }, Some(out.trace)))
            }
        }
    }

    /// Calibrated densities on `ys`; instance `i` draws from `rng.child(STREAM_PREDICT + i)`.
    pub fn distributions(
        &self,
        preds: &[GaussianPrediction],
        ys: &[f64],
        mc_samples: usize,
        rng: &RngStream,
    ) -> Result<Vec<GridDistribution>> {
        match self {
            Calibrator::None => preds.par_iter().map(|p| GridDistribution::from_gaussian(p, ys)).collect(),
            Calibrator::Iso { map } => preds
                .par_iter()
                .map(|p| calibrate_distribution_iso(map, p, ys))
                .collect(),
            Calibrator::GpBeta { state } => {
                let post = state.posterior()?;
                preds
                    .par_iter()
                    .enumerate()
                    .map(|(i, p)| post.predict_density(p, ys, mc_samples, &mut rng.child(STREAM_PREDICT + i as u64)))
                    .collect()
            }
        }
    }

    /// Mean calibration maps on `q_grid`; instance `i` draws from `rng.child(STREAM_MAP + i)`.
    pub fn mean_maps(
        &self,
        preds: &[GaussianPrediction],
        q_grid: &[f64],
        mc_samples: usize,
        rng: &RngStream,
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Calibrator::None => Ok(vec![q_grid.to_vec(); preds.len()]),
            Calibrator::Iso { map } => {
                let row: Vec<f64> = q_grid.iter().map(|&q| apply_map(map, q)).collect();
                Ok(vec![row; preds.len()])
            }
            Calibrator::GpBeta { state } => {
                let post = state.posterior()?;
                preds
                    .par_iter()
                    .enumerate()
                    .map(|(i, p)| {
                        post.predict_calibration_map(p, q_grid, mc_samples, &mut rng.child(STREAM_MAP + i as u64))
                    })
                    .collect()
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            calibrator: self.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Calibrator> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(CalibError::invalid(format!(
                "{}: unsupported model format {:?} version {}",
                path.display(),
                file.format,
                file.version
            )));
        }
        match &file.calibrator {
            Calibrator::None => {}
            Calibrator::Iso { map } => map.validate()?,
            Calibrator::GpBeta { state } => state.validate()?,
        }
        Ok(file.calibrator)
    }
}

/// Largest `|map(q) − q|` over the map's knots and the endpoints.
pub fn iso_sup_deviation(map: &IsotonicMap) -> f64 {
    map.knot_x
        .iter()
        .copied()
        .chain([0.0, 1.0])
        .map(|q| (apply_map(map, q) - q).abs())
        .fold(0.0, f64::max)
}

/// Largest `|map(q) − q|` over a tabulated map.
pub fn tabulated_sup_deviation(q_grid: &[f64], values: &[f64]) -> f64 {
    q_grid.iter().zip(values).map(|(q, v)| (v - q).abs()).fold(0.0, f64::max)
}

/// Train and test predictions with their targets.
#[derive(Debug, Clone)]
pub struct SplitPredictions {
    pub train_preds: Vec<GaussianPrediction>,
    pub train_ys: Vec<f64>,
    pub test_preds: Vec<GaussianPrediction>,
    pub test_ys: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Keyed by `base` and calibrator name.
    pub reports: BTreeMap<String, EvalReport>,
    /// Sup-distance of each calibrator's map from the identity; for GP-Beta
    /// the maximum over test inputs of the per-input mean map.
    pub map_deviation: BTreeMap<String, f64>,
    pub calibrators: BTreeMap<String, Calibrator>,
    pub trace: Option<TrainingTrace>,
    pub data: SplitPredictions,
}

impl ExperimentOutcome {
    /// The `report.json` document.
    pub fn report_json(&self) -> Value {
        let mut doc = serde_json::Map::new();
        for (name, r) in &self.reports {
            doc.insert(name.clone(), r.to_flat_json());
        }
        let dev: serde_json::Map<String, Value> =
            self.map_deviation.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
        doc.insert("map_sup_deviation".into(), Value::Object(dev));
        Value::Object(doc)
    }
}

fn predictions_as_dataset(preds: &[GaussianPrediction], ys: &[f64]) -> Result<Dataset> {
    let feats = DMatrix::from_fn(preds.len(), 2, |i, j| if j == 0 { preds[i].mu } else { preds[i].var });
    Dataset::new(feats, ys.to_vec())
}

fn dataset_as_predictions(ds: &Dataset) -> (Vec<GaussianPrediction>, Vec<f64>) {
    let f = ds.features();
    let preds = (0..ds.len()).map(|i| GaussianPrediction::new(f[(i, 0)], f[(i, 1)])).collect();
    (preds, ds.targets().to_vec())
}

/// Loads or generates data, splits it and produces base predictions for both sides.
pub fn base_predictions(cfg: &ExperimentConfig, root: &RngStream) -> Result<SplitPredictions> {
    let ds = match &cfg.source {
        DataSource::Synthetic { n } => gen_synthetic(*n, &mut root.child(STREAM_DATA)),
        DataSource::Csv { path } => load_csv(path),
        DataSource::Predictions { path } => {
            load_predictions_csv(path).and_then(|(p, y)| predictions_as_dataset(&p, &y))
        }
    }
    .map_err(|e| e.in_stage("data"))?;
    let (train, test) = train_test_split(&ds, cfg.split, &mut root.child(STREAM_SPLIT)).map_err(|e| e.in_stage("split"))?;

    let predict_all = |f: &dyn Fn(&[f64]) -> Result<GaussianPrediction>, d: &Dataset| -> Result<Vec<GaussianPrediction>> {
        (0..d.len()).map(|i| f(&d.row(i))).collect()
    };
    let (train_preds, test_preds) = match cfg.base {
        BaseModelKind::Ols => {
            let m = ols_fit(&train).map_err(|e| e.in_stage("base model"))?;
            let f = |x: &[f64]| ols_predict(&m, x);
            (predict_all(&f, &train)?, predict_all(&f, &test)?)
        }
        BaseModelKind::BayesRidge => {
            let m = bayes_ridge_fit_with(&train, &BayesRidgeConfig::default()).map_err(|e| e.in_stage("base model"))?;
            let f = |x: &[f64]| bayes_ridge_predict(&m, x);
            (predict_all(&f, &train)?, predict_all(&f, &test)?)
        }
        BaseModelKind::External => (dataset_as_predictions(&train).0, dataset_as_predictions(&test).0),
    };
    Ok(SplitPredictions {
        train_preds,
        train_ys: train.targets().to_vec(),
        test_preds,
        test_ys: test.targets().to_vec(),
    })
}

/// Test indices sorted by predicted mean, then `count` picked evenly.
fn export_indices(preds: &[GaussianPrediction], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].mu.total_cmp(&preds[b].mu).then(a.cmp(&b)));
    let count = count.min(order.len());
    (0..count)
        .map(|j| order[((j as f64 + 0.5) / count as f64 * order.len() as f64) as usize])
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let data = base_predictions(cfg, &root)?;

    let all_preds: Vec<GaussianPrediction> = data.train_preds.iter().chain(&data.test_preds).copied().collect();
    let grid = make_grid(&all_preds, cfg.grid_size, cfg.pad).map_err(|e| e.in_stage("grid"))?;
    let q_grid = cfg.q_grid();

    let mut reports = BTreeMap::new();
    let mut dists: BTreeMap<String, Vec<GridDistribution>> = BTreeMap::new();
    let base_dists = Calibrator::None
        .distributions(&data.test_preds, &grid, cfg.predict_samples, &root)
        .map_err(|e| e.in_stage("base densities"))?;
    reports.insert("base".to_string(), evaluate(&base_dists, &data.test_ys).map_err(|e| e.in_stage("evaluate base"))?);
    dists.insert("base".to_string(), base_dists);

    let mut calibrators = BTreeMap::new();
    let mut map_deviation = BTreeMap::new();
    let mut maps: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut trace = None;
    let mut kinds = cfg.calibrators.clone();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        let name = kind.name().to_string();
        log::info!("fitting calibrator {name}");
        let (cal, tr) = Calibrator::fit(kind, &data.train_preds, &data.train_ys, &train_cfg)
            .map_err(|e| e.in_stage(&format!("fit {name}")))?;
        if tr.is_some() {
            trace = tr;
        }
        let d = cal
            .distributions(&data.test_preds, &grid, cfg.predict_samples, &root)
            .map_err(|e| e.in_stage(&format!("predict {name}")))?;
        reports.insert(name.clone(), evaluate(&d, &data.test_ys).map_err(|e| e.in_stage(&format!("evaluate {name}")))?);
        dists.insert(name.clone(), d);

        let m = cal
            .mean_maps(&data.test_preds, &q_grid, cfg.map_samples, &root)
            .map_err(|e| e.in_stage(&format!("maps {name}")))?;
        let dev = match &cal {
            Calibrator::Iso { map } => iso_sup_deviation(map),
            _ => m.iter().map(|row| tabulated_sup_deviation(&q_grid, row)).fold(0.0, f64::max),
        };
        map_deviation.insert(name.clone(), dev);
        maps.insert(name.clone(), m);
        calibrators.insert(name, cal);
    }

    let outcome = ExperimentOutcome { reports, map_deviation, calibrators, trace, data };
    if let Some(dir) = &cfg.out_dir {
        write_artifacts(dir, cfg, &outcome, &grid, &q_grid, &dists, &maps).map_err(|e| e.in_stage("write artifacts"))?;
    }
    Ok(outcome)
}

fn write_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    grid: &[f64],
    q_grid: &[f64],
    dists: &BTreeMap<String, Vec<GridDistribution>>,
    maps: &BTreeMap<String, Vec<Vec<f64>>>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome.report_json())? + "\n")?;
    for (name, cal) in &outcome.calibrators {
        cal.save(&dir.join(format!("model_{name}.json")))?;
    }
    if let Some(trace) = &outcome.trace {
        write_table(
            &dir.join("trace.csv"),
            &["step".to_string(), "elbo".to_string()],
            trace.iter().map(|&(s, v)| vec![s as f64, v]),
        )?;
    }

    let test = &outcome.data;
    let picks = export_indices(&test.test_preds, cfg.export_points);
    write_table(
        &dir.join("export_points.csv"),
        &["k", "test_index", "mu", "var", "y"].map(String::from),
        picks.iter().enumerate().map(|(k, &i)| {
            let p = test.test_preds[i];
            vec![k as f64, i as f64, p.mu, p.var, test.test_ys[i]]
        }),
    )?;
    for (k, &i) in picks.iter().enumerate() {
        let mut header = vec!["y".to_string()];
        header.extend(dists.keys().cloned());
        write_table(
            &dir.join(format!("density_{k}.csv")),
            &header,
            grid.iter().enumerate().map(|(g, &y)| {
                let mut row = vec![y];
                row.extend(dists.values().map(|d| d[i].pdf()[g]));
                row
            }),
        )?;
        let mut header = vec!["q".to_string()];
        header.extend(maps.keys().cloned());
        write_table(
            &dir.join(format!("map_{k}.csv")),
            &header,
            q_grid.iter().enumerate().map(|(g, &q)| {
                let mut row = vec![q];
                row.extend(maps.values().map(|m| m[i][g]));
                row
            }),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> ExperimentConfig {
        ExperimentConfig {
            source: DataSource::Synthetic { n: 80 },
            calibrators: vec![CalibratorKind::None, CalibratorKind::Iso, CalibratorKind::GpBeta],
            train: TrainConfig { n_inducing: 4, batch_size: 32, mc_samples: 4, steps: 20, ..TrainConfig::synthetic() },
            grid_size: 256,
            predict_samples: 8,
            map_samples: 8,
            map_points: 19,
            seed: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn none_calibrator_reproduces_base_report() {
        let out = run_experiment(&quick_config()).unwrap();
        assert_eq!(out.reports["none"], out.reports["base"]);
        assert_eq!(out.map_deviation["none"], 0.0);
        assert_eq!(out.data.train_preds.len(), 60);
        assert_eq!(out.data.test_preds.len(), 20);
    }

    #[test]
    fn rejects_inconsistent_base_and_source() {
        let cfg = ExperimentConfig { base: BaseModelKind::External, ..quick_config() };
        assert!(run_experiment(&cfg).unwrap_err().is_validation());
    }

    #[test]
    fn writes_identical_artifacts_across_runs() {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let cfg = ExperimentConfig { out_dir: Some(d.path().to_path_buf()), ..quick_config() };
            run_experiment(&cfg).unwrap();
        }
        for name in ["report.json", "trace.csv", "density_0.csv", "map_2.csv", "model_gp-beta.json", "model_iso.json"] {
            let a = fs::read(dirs[0].path().join(name)).unwrap();
            let b = fs::read(dirs[1].path().join(name)).unwrap();
            assert!(!a.is_empty());
            assert_eq!(a, b, "{name} differs");
        }
        let header = fs::read_to_string(dirs[0].path().join("density_1.csv")).unwrap();
        assert!(header.starts_with("y,base,gp-beta,iso,none\n"));
    }

    #[test]
    fn calibrator_files_round_trip_exactly() {
        let out = run_experiment(&quick_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for cal in out.calibrators.values() {
            let path = dir.path().join("m.json");
            cal.save(&path).unwrap();
            assert_eq!(&Calibrator::load(&path).unwrap(), cal);
        }
    }

    #[test]
    fn config_json_accepts_partial_documents() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"source": {"kind": "csv", "path": "x.csv"}, "base": "bayes-ridge", "calibrators": ["gp-beta"], "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(cfg.source, DataSource::Csv { path: "x.csv".into() });
        assert_eq!(cfg.base, BaseModelKind::BayesRidge);
        assert_eq!(cfg.grid_size, DEFAULT_GRID_SIZE);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
