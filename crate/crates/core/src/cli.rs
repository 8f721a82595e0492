//! Command-line pipeline: simulate, train, forecast, evaluate, plot.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::evaluate::{evaluate_sde, histogram, qq_csv, qq_points, EvalReport};
use crate::forecast::{interval_multiplier, mc_forecast, mc_forecast_ensemble, parse_forecast_csv};
use crate::models::{builtin_regression, builtin_sde, RegressionCaseSpec, SdeCoefficients};
use crate::neuralnet::{format_real, parse_weights, theta_report, write_weights, MlpSpec, Weights, WeightsMeta};
use crate::plot::Chart;
use crate::simulate::{regression_sample, simulate_model, FittedTheta, RegressionDataset, Rng, Trajectory, TrueTheta};
use crate::train::{fit_regression, fit_sde_with_observer, FitResult, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

fn config(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "thetafit",
    version,
    about = "Calibrate time-dependent parameters of SDE and regression models"
)]
pub struct Cli {
    /// Optional TOML file with defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory or regression dataset.
    Simulate(SimulateArgs),
    /// Fit the network to observed data.
    Train(TrainArgs),
    /// Monte Carlo prediction intervals from fitted weights.
    Forecast(ForecastArgs),
    /// Compare true and fitted models through coupled ensembles.
    Evaluate(EvaluateArgs),
    /// Render an SVG chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Target {
    /// Built-in SDE: ex1, ex2, ex3, ex4_log.
    #[arg(long)]
    pub model: Option<String>,
    /// Built-in regression case: case1, case2, case3.
    #[arg(long)]
    pub case: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub target: Target,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep every k-th grid point of an SDE path.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub target: Target,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weights file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Width of each of the three hidden layers.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Factor applied to t before it enters the network.
    #[arg(long)]
    pub input_scale: Option<f64>,
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub target: Target,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Observed trajectory; the forecast starts from its last point.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Start from this row of the trajectory instead of the last one.
    #[arg(long)]
    pub start_index: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Average centers and scales over this many carrier paths.
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub target: Target,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Precomputed endpoints under the true parameters, one per line.
    #[arg(long)]
    pub true_endpoints: Option<PathBuf>,
    /// Precomputed endpoints under the fitted parameters, one per line.
    #[arg(long)]
    pub fitted_endpoints: Option<PathBuf>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file (key=value lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub qq_out: Option<PathBuf>,
    #[arg(long)]
    pub hist_out: Option<PathBuf>,
    /// Paired endpoints CSV `i,true,fitted`.
    #[arg(long)]
    pub endpoints_out: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Theta,
    Forecast,
    Hist,
    Qq,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: Option<PlotKind>,
    #[command(flatten)]
    pub target: Target,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Forecast CSV, endpoints CSV or QQ CSV depending on the kind.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Observed trajectory drawn under a forecast.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Values read from `--config`; every field may be overridden by a flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub case: Option<String>,
    pub seed: Option<u64>,
    pub stride: Option<usize>,
    pub data: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub forecast: ForecastFile,
    #[serde(default)]
    pub evaluate: EvaluateFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub hidden: Option<usize>,
    pub input_scale: Option<f64>,
    pub shuffle: Option<bool>,
    pub validation_fraction: Option<f64>,
    pub patience: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastFile {
    pub steps: Option<usize>,
    pub alpha: Option<f64>,
    pub ensemble: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateFile {
    pub paths: Option<usize>,
    pub bins: Option<usize>,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = read(p)?;
            toml::from_str(&text).map_err(|e| config(format!("config {}: {e}", p.display())))
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| config(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| config(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| config(format!("cannot write {}: {e}", path.display())))
}

fn need<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| config(format!("missing required option --{flag}")))
}

enum Problem {
    Sde(crate::models::SdeModelSpec<crate::models::BuiltinSde>),
    Regression(RegressionCaseSpec),
}

fn resolve(target: &Target, file: &FileConfig) -> Result<Problem, CliError> {
    let model = target.model.clone().or_else(|| {
        if target.case.is_none() {
            file.model.clone()
        } else {
            None
        }
    });
    let case = target.case.clone().or_else(|| {
        if target.model.is_none() {
            file.case.clone()
        } else {
            None
        }
    });
    match (model, case) {
        (Some(_), Some(_)) => Err(config("give either --model or --case, not both")),
        (Some(m), None) => builtin_sde(&m).map(Problem::Sde).map_err(config),
        (None, Some(c)) => builtin_regression(&c).map(Problem::Regression).map_err(config),
        (None, None) => Err(config("missing --model or --case")),
    }
}

fn load_weights(path: &Path) -> Result<(MlpSpec, Weights, WeightsMeta), CliError> {
    let text = read(path)?;
    parse_weights(&text).map_err(|e| config(format!("{}: {e}", path.display())))
}

fn check_heads(spec: &MlpSpec, expected: &[crate::neuralnet::HeadKind]) -> Result<(), CliError> {
    if spec.heads() != expected {
        let tags: Vec<&str> = expected.iter().map(|h| h.tag()).collect();
        return Err(config(format!(
            "weights heads do not match the model (expected {})",
            tags.join(",")
        )));
    }
    Ok(())
}

/// Parse CLI arguments from `args` and run the command.
pub fn run_from<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            Ok(e.to_string().trim_end().to_string())
        }
        Err(e) => Err(config(e.to_string().trim_end())),
    }
}

/// Run a parsed command; returns the summary printed on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Forecast(a) => cmd_forecast(a, &file),
        Command::Evaluate(a) => cmd_evaluate(a, &file),
        Command::Plot(a) => cmd_plot(a, &file),
    }
}

fn cmd_simulate(a: SimulateArgs, file: &FileConfig) -> Result<String, CliError> {
    let problem = resolve(&a.target, file)?;
    let seed = need(a.seed.or(file.seed), "seed")?;
    let out = need(a.out.or_else(|| file.out.clone()), "out")?;
    let stride = a.stride.or(file.stride).unwrap_or(1);
    match problem {
        Problem::Sde(model) => {
            let truth = TrueTheta::new(&model.coeffs).expect("built-in models have a reference Θ");
            let path = simulate_model(&model, &truth, seed).map_err(|e| CliError::Simulation(e.to_string()))?;
            let path = path.subsample(stride).map_err(config)?;
            write(&out, &path.to_csv())?;
            Ok(format!(
                "n={} h={} T={}",
                path.n_transitions(),
                format_real(path.step()),
                format_real(path.time(path.n_transitions()))
            ))
        }
        Problem::Regression(case) => {
            if stride != 1 {
                return Err(config("--stride applies to SDE models only"));
            }
            let mut rng = Rng::new(seed, 0);
            let data = regression_sample(&case, &mut rng).map_err(|e| CliError::Simulation(e.to_string()))?;
            write(&out, &data.to_csv())?;
            let h = 2.0 * std::f64::consts::PI / case.n as f64;
            Ok(format!(
                "n={} h={} T={}",
                data.len(),
                format_real(h),
                format_real(2.0 * std::f64::consts::PI)
            ))
        }
    }
}

fn train_config(a: &TrainArgs, file: &FileConfig, name: &str, seed: u64) -> TrainConfig {
    let f = &file.train;
    let mut cfg = TrainConfig::reference(name, seed).unwrap_or_else(|| TrainConfig::new(64, 100, seed));
    if let Some(v) = a.epochs.or(f.epochs) {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size.or(f.batch_size) {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate.or(f.learning_rate) {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.beta1 {
        cfg.beta1 = v;
    }
    if let Some(v) = f.beta2 {
        cfg.beta2 = v;
    }
    if let Some(v) = f.epsilon {
        cfg.epsilon = v;
    }
    cfg.shuffle = if a.no_shuffle { false } else { f.shuffle.unwrap_or(true) };
    cfg.validation_fraction = a.validation_fraction.or(f.validation_fraction);
    cfg.early_stopping_patience = a.patience.or(f.patience);
    cfg.checkpoint_every = a.checkpoint_every.or(f.checkpoint_every);
    cfg
}

fn loss_csv(r: &FitResult) -> String {
    let mut s = String::from(if r.validation_history.is_empty() {
        "epoch,loss\n"
    } else {
        "epoch,loss,validation\n"
    });
    for (i, l) in r.loss_history.iter().enumerate() {
        s.push_str(&format!("{},{}", i + 1, format_real(*l)));
        if let Some(v) = r.validation_history.get(i) {
            s.push_str(&format!(",{}", format_real(*v)));
        }
        s.push('\n');
    }
    s
}

fn cmd_train(a: TrainArgs, file: &FileConfig) -> Result<String, CliError> {
    let problem = resolve(&a.target, file)?;
    let seed = need(a.seed.or(file.seed), "seed")?;
    let data_path = need(a.data.clone().or_else(|| file.data.clone()), "data")?;
    let out = need(a.out.clone().or_else(|| file.out.clone()), "out")?;
    let loss_out = a.loss_out.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let hidden = a.hidden.or(file.train.hidden).unwrap_or(32);
    let input_scale = a.input_scale.or(file.train.input_scale).unwrap_or(1.0);
    let text = read(&data_path)?;

    let (name, heads) = match &problem {
        Problem::Sde(m) => (m.name.clone(), m.coeffs.heads()),
        Problem::Regression(c) => (c.name.clone(), RegressionCaseSpec::heads()),
    };
    let spec = MlpSpec::four_layer(hidden, heads)
        .and_then(|s| s.with_input_scale(input_scale))
        .map_err(config)?;
    let cfg = train_config(&a, file, &name, seed);
    let mut notes = Vec::new();

    let result = match &problem {
        Problem::Sde(model) => {
            let traj = Trajectory::from_csv(&text).map_err(|e| config(format!("{}: {e}", data_path.display())))?;
            let n = traj.n_transitions();
            cfg.validate(n).map_err(config)?;
            if spec.param_count() >= n {
                notes.push(format!(
                    "warning: {} weights for {} transitions; the network is not smaller than the data",
                    spec.param_count(),
                    n
                ));
            }
            let ckpt_spec = spec.clone();
            let ckpt_base = out.clone();
            fit_sde_with_observer(&cfg, &spec, &model.coeffs, &traj, seed, |epoch, w, loss| {
                let mut p = ckpt_base.clone().into_os_string();
                p.push(format!(".epoch{epoch}"));
                let meta = WeightsMeta {
                    epoch: Some(epoch),
                    loss: Some(loss),
                };
                fs::write(PathBuf::from(p), write_weights(&ckpt_spec, w, &meta)).map_err(|e| e.to_string())
            })
            .map_err(|e| match e {
                crate::train::TrainError::Config(m) => CliError::Config(m),
                other => CliError::Training(other.to_string()),
            })?
        }
        Problem::Regression(_) => {
            let data =
                RegressionDataset::from_csv(&text).map_err(|e| config(format!("{}: {e}", data_path.display())))?;
            cfg.validate(data.len()).map_err(config)?;
            if cfg.checkpoint_every.is_some() {
                return Err(config("checkpoints are available for SDE models only"));
            }
            if spec.param_count() >= data.len() {
                notes.push(format!(
                    "warning: {} weights for {} observations; the network is not smaller than the data",
                    spec.param_count(),
                    data.len()
                ));
            }
            fit_regression(&cfg, &spec, &data, seed).map_err(|e| match e {
                crate::train::TrainError::Config(m) => CliError::Config(m),
                other => CliError::Training(other.to_string()),
            })?
        }
    };

    let final_loss = result.loss_history.last().copied();
    let meta = WeightsMeta {
        epoch: Some(result.epochs_run),
        loss: final_loss,
    };
    write(&out, &write_weights(&spec, &result.weights, &meta))?;
    write(&loss_out, &loss_csv(&result))?;
    notes.push(format!(
        "epochs={} loss={} weights={}",
        result.epochs_run,
        final_loss.map_or_else(|| "nan".into(), format_real),
        result.weights.len()
    ));
    Ok(notes.join("\n"))
}

fn cmd_forecast(a: ForecastArgs, file: &FileConfig) -> Result<String, CliError> {
    let Problem::Sde(model) = resolve(&a.target, file)? else {
        return Err(config("forecasting applies to SDE models only"));
    };
    let seed = need(a.seed.or(file.seed), "seed")?;
    let weights_path = need(a.weights.or_else(|| file.weights.clone()), "weights")?;
    let data_path = need(a.data.or_else(|| file.data.clone()), "data")?;
    let out = need(a.out.or_else(|| file.out.clone()), "out")?;
    let steps = a.steps.or(file.forecast.steps).unwrap_or(100);
    let alpha = a.alpha.or(file.forecast.alpha).unwrap_or(0.95);
    interval_multiplier(alpha).map_err(config)?;

    let (spec, weights, _) = load_weights(&weights_path)?;
    check_heads(&spec, &model.coeffs.heads())?;
    let traj = Trajectory::from_csv(&read(&data_path)?).map_err(|e| config(format!("{}: {e}", data_path.display())))?;
    let start = a.start_index.unwrap_or(traj.len() - 1);
    if start >= traj.len() {
        return Err(config(format!(
            "start index {start} beyond the {} rows of the trajectory",
            traj.len()
        )));
    }
    let fitted = FittedTheta { spec, weights };
    let (x_n, t_n, h) = (traj.x(start), traj.time(start), traj.step());
    let f = match a.ensemble.or(file.forecast.ensemble) {
        Some(paths) => mc_forecast_ensemble(&model.coeffs, &fitted, x_n, t_n, steps, h, alpha, paths, seed),
        None => mc_forecast(
            &model.coeffs,
            &fitted,
            x_n,
            t_n,
            steps,
            h,
            alpha,
            &mut Rng::new(seed, 0),
        ),
    }
    .map_err(|e| match e {
        crate::forecast::ForecastError::NonFinite { .. } => CliError::Simulation(e.to_string()),
        other => config(other),
    })?;
    write(&out, &f.to_csv())?;
    Ok(format!(
        "steps={} alpha={} q={}",
        f.len(),
        alpha,
        format_real(f.multiplier)
    ))
}

fn read_values(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.split(',').next_back().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(e) => return Err(config(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn endpoints_csv(end_true: &[f64], end_fit: &[f64]) -> String {
    let mut s = String::from("i,true,fitted\n");
    for (i, (a, b)) in end_true.iter().zip(end_fit).enumerate() {
        s.push_str(&format!("{i},{},{}\n", format_real(*a), format_real(*b)));
    }
    s
}

fn cmd_evaluate(a: EvaluateArgs, file: &FileConfig) -> Result<String, CliError> {
    let out = need(a.out.clone().or_else(|| file.out.clone()), "out")?;
    let bins = a.bins.or(file.evaluate.bins).unwrap_or(40);
    let (report, end_true, end_fit) = match (&a.true_endpoints, &a.fitted_endpoints) {
        (Some(t), Some(f)) => {
            let (et, ef) = (read_values(t)?, read_values(f)?);
            let rep = EvalReport::from_endpoints(&et, &ef).map_err(config)?;
            (rep, et, ef)
        }
        (None, None) => {
            let Problem::Sde(model) = resolve(&a.target, file)? else {
                return Err(config("ensemble evaluation applies to SDE models only"));
            };
            let seed = need(a.seed.or(file.seed), "seed")?;
            let weights_path = need(a.weights.clone().or_else(|| file.weights.clone()), "weights")?;
            let paths = a.paths.or(file.evaluate.paths).unwrap_or(1000);
            if paths < 2 {
                return Err(config("--paths must be at least 2"));
            }
            let (spec, weights, _) = load_weights(&weights_path)?;
            check_heads(&spec, &model.coeffs.heads())?;
            let fitted = FittedTheta { spec, weights };
            let ev = evaluate_sde(&model, &fitted, paths, seed).map_err(|e| match e {
                crate::evaluate::EvalError::Sim(s) => CliError::Simulation(s.to_string()),
                other => config(other),
            })?;
            (ev.report, ev.end_true, ev.end_fit)
        }
        _ => return Err(config("give both --true-endpoints and --fitted-endpoints")),
    };
    write(&out, &report.to_text())?;
    if let Some(p) = &a.endpoints_out {
        write(p, &endpoints_csv(&end_true, &end_fit))?;
    }
    if let Some(p) = &a.qq_out {
        let q = qq_points(&end_true, &end_fit).map_err(config)?;
        write(p, &qq_csv(&q))?;
    }
    if let Some(p) = &a.hist_out {
        let h = histogram(&[&end_true, &end_fit], bins).map_err(config)?;
        write(p, &h.to_csv(&["true", "fitted"]))?;
    }
    Ok(format!(
        "ks_d={} ks_p={}",
        format_real(report.ks.d),
        format_real(report.ks.p)
    ))
}

fn read_columns(path: &Path, want: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let text = read(path)?;
    let mut cols = vec![Vec::new(); want];
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < want {
            return Err(config(format!("{}:{}: expected {want} columns", path.display(), i + 1)));
        }
        let start = cells.len() - want;
        for (c, cell) in cells[start..].iter().enumerate() {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|e| config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            cols[c].push(v);
        }
    }
    Ok(cols)
}

type ThetaFn = Box<dyn Fn(f64) -> Vec<f64>>;

fn cmd_plot(a: PlotArgs, file: &FileConfig) -> Result<String, CliError> {
    let kind = need(a.kind, "kind")?;
    let out = need(a.out.clone().or_else(|| file.out.clone()), "out")?;
    let svg = match kind {
        PlotKind::Theta => {
            let problem = resolve(&a.target, file)?;
            let weights_path = need(a.weights.clone().or_else(|| file.weights.clone()), "weights")?;
            let (spec, weights, _) = load_weights(&weights_path)?;
            let (names, horizon, truth): (Vec<String>, f64, ThetaFn) = match problem {
                Problem::Sde(m) => {
                    check_heads(&spec, &m.coeffs.heads())?;
                    let c = m.coeffs;
                    (
                        c.component_names(),
                        m.horizon,
                        Box::new(move |t| c.true_theta(t).unwrap_or_default()),
                    )
                }
                Problem::Regression(c) => {
                    check_heads(&spec, &RegressionCaseSpec::heads())?;
                    let names = crate::models::REGRESSION_COMPONENTS
                        .iter()
                        .map(|s| s.to_string())
                        .collect();
                    (
                        names,
                        2.0 * std::f64::consts::PI,
                        Box::new(move |t| c.params(t).to_vec()),
                    )
                }
            };
            let ts: Vec<f64> = (0..=400).map(|k| horizon * k as f64 / 400.0).collect();
            let fit: Vec<Vec<f64>> = ts.iter().map(|&t| theta_report(&spec, &weights, t)).collect();
            let tru: Vec<Vec<f64>> = ts.iter().map(|&t| truth(t)).collect();
            let mut chart = Chart::new("Parameter functions", "t", "value");
            for (i, n) in names.iter().enumerate() {
                if tru[0].len() > i {
                    let y: Vec<f64> = tru.iter().map(|v| v[i]).collect();
                    chart = chart.line(&format!("{n} true"), &ts, &y).map_err(config)?;
                }
                let y: Vec<f64> = fit.iter().map(|v| v[i]).collect();
                chart = chart.dashed_line(&format!("{n} fitted"), &ts, &y).map_err(config)?;
            }
            chart.render().map_err(config)?
        }
        PlotKind::Forecast => {
            let input = need(a.input.clone(), "input")?;
            let rows = parse_forecast_csv(&read(&input)?).map_err(|e| config(format!("{}: {e}", input.display())))?;
            if rows.is_empty() {
                return Err(config(format!("{}: no forecast rows", input.display())));
            }
            let ts: Vec<f64> = rows.iter().map(|r| r[1]).collect();
            let center: Vec<f64> = rows.iter().map(|r| r[5]).collect();
            let scale: Vec<f64> = rows.iter().map(|r| r[6]).collect();
            let mut chart = Chart::new("Forecast with 68% and 95% intervals", "t", "x");
            for alpha in [0.95, 0.68] {
                let q = interval_multiplier(alpha).map_err(config)?;
                let lo: Vec<f64> = center.iter().zip(&scale).map(|(c, s)| c - q * s).collect();
                let hi: Vec<f64> = center.iter().zip(&scale).map(|(c, s)| c + q * s).collect();
                chart = chart
                    .band(&format!("{:.0}% interval", alpha * 100.0), &ts, &lo, &hi, 0.25)
                    .map_err(config)?;
            }
            chart = chart
                .line("prediction", &ts, &rows.iter().map(|r| r[2]).collect::<Vec<_>>())
                .map_err(config)?;
            if let Some(d) = &a.data {
                let traj = Trajectory::from_csv(&read(d)?).map_err(|e| config(format!("{}: {e}", d.display())))?;
                let (t0, t1) = (ts[0] - 1e-12, ts[ts.len() - 1] + 1e-12);
                let (xs, ys): (Vec<f64>, Vec<f64>) = (0..traj.len())
                    .map(|k| (traj.time(k), traj.x(k)))
                    .filter(|(t, _)| *t >= t0 && *t <= t1)
                    .unzip();
                if !xs.is_empty() {
                    chart = chart.points("observed", &xs, &ys).map_err(config)?;
                }
            }
            chart.render().map_err(config)?
        }
        PlotKind::Hist => {
            let input = need(a.input.clone(), "input")?;
            let cols = read_columns(&input, 2)?;
            if cols[0].is_empty() {
                return Err(config(format!("{}: no endpoints", input.display())));
            }
            let bins = a.bins.or(file.evaluate.bins).unwrap_or(40);
            let h = histogram(&[&cols[0], &cols[1]], bins).map_err(config)?;
            let to_f = |c: &Vec<usize>| c.iter().map(|&v| v as f64).collect::<Vec<_>>();
            Chart::new("Endpoint distribution", "X(T)", "count")
                .bars("true", &h.edges, &to_f(&h.counts[0]))
                .and_then(|c| c.bars("fitted", &h.edges, &to_f(&h.counts[1])))
                .and_then(|c| c.render())
                .map_err(config)?
        }
        PlotKind::Qq => {
            let input = need(a.input.clone(), "input")?;
            let cols = read_columns(&input, 2)?;
            if cols[0].is_empty() {
                return Err(config(format!("{}: no points", input.display())));
            }
            let q = qq_points(&cols[0], &cols[1]).map_err(config)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = q.into_iter().unzip();
            let lo = xs[0].min(ys[0]);
            let hi = xs[xs.len() - 1].max(ys[ys.len() - 1]);
            Chart::new("QQ plot", "true quantiles", "fitted quantiles")
                .points("quantiles", &xs, &ys)
                .and_then(|c| c.dashed_line("y = x", &[lo, hi], &[lo, hi]))
                .and_then(|c| c.render())
                .map_err(config)?
        }
    };
    write(&out, &svg)?;
    Ok(format!("wrote {}", out.display()))
}
