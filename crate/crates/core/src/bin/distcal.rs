use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use distcal::base::{bayes_ridge_fit_with, bayes_ridge_predict, ols_fit, ols_predict, BayesRidgeConfig};
use distcal::data::{gen_synthetic, load_csv, load_predictions_csv, write_csv, write_predictions_csv, write_table};
use distcal::dist::{make_grid, train_test_split, DEFAULT_GRID_PAD, DEFAULT_GRID_SIZE};
use distcal::experiment::{run_experiment, BaseModelKind, Calibrator, CalibratorKind, DataSource, ExperimentConfig};
use distcal::metrics::evaluate;
use distcal::svgp::{TrainConfig, DEFAULT_PREDICT_SAMPLES};
use distcal::{CalibError, GaussianPrediction, Result, RngStream};

/// Distribution calibration for probabilistic regression.
#[derive(Parser)]
#[command(name = "distcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-branch dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 360)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a base regressor and write train/test prediction CSVs.
    FitBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = BaseArg::Ols)]
        model: BaseArg,
        #[arg(long, default_value_t = 0.75)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit a calibrator on training predictions (`mu,var,y`).
    Calibrate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::GpBeta)]
        method: MethodArg,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the per-step ELBO.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score predictions, optionally after calibration, and print a flat JSON report.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        /// Calibrator file; omitted means the base predictions are scored.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
        grid_size: usize,
        #[arg(long, default_value_t = DEFAULT_GRID_PAD)]
        pad: f64,
        #[arg(long, default_value_t = DEFAULT_PREDICT_SAMPLES)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: data, base model, calibrators, evaluation and artifacts.
    Run(RunArgs),
    /// Tabulate mean calibration maps for each prediction row.
    ExportMaps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 199)]
        q_points: usize,
        #[arg(long, default_value_t = DEFAULT_PREDICT_SAMPLES)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaseArg {
    Ols,
    BayesRidge,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    None,
    Iso,
    GpBeta,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Synthetic,
    Uci,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Synthetic,
    Csv,
    Predictions,
}

#[derive(Args)]
struct TrainArgs {
    /// Starting hyperparameters; individual flags override them.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    inducing: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    train_seed: Option<u64>,
    /// Keep inducing inputs at their initial positions.
    #[arg(long)]
    freeze_inducing: bool,
}

impl TrainArgs {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        match self.preset {
            Some(PresetArg::Synthetic) => cfg = TrainConfig { seed: cfg.seed, ..TrainConfig::synthetic() },
            Some(PresetArg::Uci) => cfg = TrainConfig { seed: cfg.seed, ..TrainConfig::uci() },
            None => {}
        }
        cfg.n_inducing = self.inducing.unwrap_or(cfg.n_inducing);
        cfg.batch_size = self.batch.unwrap_or(cfg.batch_size);
        cfg.mc_samples = self.mc_samples.unwrap_or(cfg.mc_samples);
        cfg.learning_rate = self.lr.unwrap_or(cfg.learning_rate);
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.seed = self.train_seed.unwrap_or(cfg.seed);
        if self.freeze_inducing {
            cfg.optimize_inducing = false;
        }
        cfg
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seed: u64,
    /// JSON experiment configuration; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    /// Input file for the csv and predictions sources.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Size of the synthetic set.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    base: Option<BaseArg>,
    /// Comma-separated subset of none, iso, gp-beta.
    #[arg(long, value_delimiter = ',')]
    calibrators: Option<Vec<String>>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    pad: Option<f64>,
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    predict_samples: Option<usize>,
    #[arg(long)]
    map_samples: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.seed = self.seed;
        if let Some(source) = self.source {
            let need_path = || {
                self.data
                    .clone()
                    .ok_or_else(|| CalibError::InvalidInput("--data is required for this source".into()))
            };
            cfg.source = match source {
                SourceArg::Synthetic => DataSource::Synthetic { n: self.n.unwrap_or(360) },
                SourceArg::Csv => DataSource::Csv { path: need_path()? },
                SourceArg::Predictions => DataSource::Predictions { path: need_path()? },
            };
        } else if let (Some(n), DataSource::Synthetic { .. }) = (self.n, &cfg.source) {
            cfg.source = DataSource::Synthetic { n };
        }
        if let Some(base) = self.base {
            cfg.base = base_kind(base);
        } else if matches!(cfg.source, DataSource::Predictions { .. }) {
            cfg.base = BaseModelKind::External;
        }
        if let Some(list) = &self.calibrators {
            cfg.calibrators = list.iter().map(|s| CalibratorKind::parse(s)).collect::<Result<_>>()?;
        }
        cfg.train = self.train.apply(cfg.train);
        cfg.grid_size = self.grid_size.unwrap_or(cfg.grid_size);
        cfg.pad = self.pad.unwrap_or(cfg.pad);
        cfg.split = self.split.unwrap_or(cfg.split);
        cfg.predict_samples = self.predict_samples.unwrap_or(cfg.predict_samples);
        cfg.map_samples = self.map_samples.unwrap_or(cfg.map_samples);
        if self.out_dir.is_some() {
            cfg.out_dir = self.out_dir.clone();
        }
        Ok(cfg)
    }
}

fn base_kind(b: BaseArg) -> BaseModelKind {
    match b {
        BaseArg::Ols => BaseModelKind::Ols,
        BaseArg::BayesRidge => BaseModelKind::BayesRidge,
        BaseArg::External => BaseModelKind::External,
    }
}

fn method_kind(m: MethodArg) -> CalibratorKind {
    match m {
        MethodArg::None => CalibratorKind::None,
        MethodArg::Iso => CalibratorKind::Iso,
        MethodArg::GpBeta => CalibratorKind::GpBeta,
    }
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { n, seed, out } => {
            let ds = gen_synthetic(n, &mut RngStream::new(seed))?;
            write_csv(&ds, &out)
        }
        Command::FitBase { data, model, split, seed, out_dir } => {
            let ds = load_csv(&data)?;
            let (train, test) = train_test_split(&ds, split, &mut RngStream::new(seed))?;
            let predict: Box<dyn Fn(&[f64]) -> Result<GaussianPrediction>> = match model {
                BaseArg::Ols => {
                    let m = ols_fit(&train)?;
                    Box::new(move |x| ols_predict(&m, x))
                }
                BaseArg::BayesRidge => {
                    let m = bayes_ridge_fit_with(&train, &BayesRidgeConfig::default())?;
                    Box::new(move |x| bayes_ridge_predict(&m, x))
                }
                BaseArg::External => {
                    return Err(CalibError::InvalidInput("fit-base needs ols or bayes-ridge".into()))
                }
            };
            fs::create_dir_all(&out_dir)?;
            for (name, part) in [("train", &train), ("test", &test)] {
                let preds = (0..part.len()).map(|i| predict(&part.row(i))).collect::<Result<Vec<_>>>()?;
                write_predictions_csv(&preds, part.targets(), &out_dir.join(format!("{name}_predictions.csv")))?;
            }
            Ok(())
        }
        Command::Calibrate { preds, method, train, out, trace } => {
            let (p, y) = load_predictions_csv(&preds)?;
            let cfg = train.apply(TrainConfig::default());
            let (cal, tr) = Calibrator::fit(method_kind(method), &p, &y, &cfg)?;
            cal.save(&out)?;
            if let (Some(path), Some(tr)) = (trace, tr) {
                write_table(
                    &path,
                    &["step".to_string(), "elbo".to_string()],
                    tr.iter().map(|&(s, v)| vec![s as f64, v]),
                )?;
            }
            Ok(())
        }
        Command::Evaluate { preds, model, grid_size, pad, mc, seed, out } => {
            let (p, y) = load_predictions_csv(&preds)?;
            let cal = match model {
                Some(path) => Calibrator::load(&path)?,
                None => Calibrator::None,
            };
            let grid = make_grid(&p, grid_size, pad)?;
            let dists = cal.distributions(&p, &grid, mc, &RngStream::new(seed))?;
            write_json(&evaluate(&dists, &y)?.to_flat_json(), out.as_deref())
        }
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let outcome = run_experiment(&cfg)?;
            write_json(&outcome.report_json(), None)
        }
        Command::ExportMaps { model, preds, out, q_points, mc, seed } => {
            if q_points == 0 {
                return Err(CalibError::InvalidInput("--q-points must be positive".into()));
            }
            let cal = Calibrator::load(&model)?;
            let (p, _) = load_predictions_csv(&preds)?;
            let q_grid: Vec<f64> = (1..=q_points).map(|k| k as f64 / (q_points + 1) as f64).collect();
            let maps = cal.mean_maps(&p, &q_grid, mc, &RngStream::new(seed))?;
            let mut header = vec!["q".to_string()];
            header.extend((0..p.len()).map(|i| format!("row_{i}")));
            write_table(
                &out,
                &header,
                q_grid.iter().enumerate().map(|(g, &q)| {
                    let mut row = vec![q];
                    row.extend(maps.iter().map(|m| m[g]));
                    row
                }),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
