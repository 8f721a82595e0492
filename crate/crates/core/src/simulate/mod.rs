//! Seeded simulation: Euler–Maruyama paths, ensembles and synthetic
//! bivariate regression data, plus their CSV forms.

mod rng;

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::models::{RegressionCaseSpec, SdeCoefficients, SdeModelSpec};
use crate::neuralnet::{format_real, theta_report, MlpSpec, Weights};

pub use rng::{standard_normal, Rng};

/// States beyond this magnitude abort the simulation.
pub const OVERFLOW_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("state left the finite range at step {step} (value {value})")]
    NonFinite { step: usize, value: f64 },
    #[error("covariance at index {k} is not positive semi-definite: {detail}")]
    Covariance { k: usize, detail: String },
    #[error("invalid simulation input: {0}")]
    Invalid(String),
    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<SimError>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsvError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Shape(String),
}

/// Supplies Θ(t) to simulations and forecasts.
pub trait ThetaProvider: Sync {
    fn theta(&self, t: f64) -> Vec<f64>;
}

/// Ground-truth Θ of a model whose coefficients know it.
pub struct TrueTheta<'a, C>(&'a C);

impl<'a, C: SdeCoefficients> TrueTheta<'a, C> {
    pub fn new(coeffs: &'a C) -> Option<Self> {
        coeffs.true_theta(0.0).map(|_| TrueTheta(coeffs))
    }
}

impl<C: SdeCoefficients> ThetaProvider for TrueTheta<'_, C> {
    fn theta(&self, t: f64) -> Vec<f64> {
        self.0.true_theta(t).expect("checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantTheta(pub Vec<f64>);

impl ThetaProvider for ConstantTheta {
    fn theta(&self, _t: f64) -> Vec<f64> {
        self.0.clone()
    }
}

/// Θ given by a closure.
pub struct FnTheta<F>(pub F);

impl<F: Fn(f64) -> Vec<f64> + Sync> ThetaProvider for FnTheta<F> {
    fn theta(&self, t: f64) -> Vec<f64> {
        (self.0)(t)
    }
}

/// A trained network, reported through its heads (|·| on diffusion heads).
#[derive(Debug, Clone, PartialEq)]
pub struct FittedTheta {
    pub spec: MlpSpec,
    pub weights: Weights,
}

impl ThetaProvider for FittedTheta {
    fn theta(&self, t: f64) -> Vec<f64> {
        theta_report(&self.spec, &self.weights, t)
    }
}

/// Θ evaluated at `start + k·step` for `k = 0..count`.
pub fn tabulate(theta: &dyn ThetaProvider, start: f64, step: f64, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .into_par_iter()
        .map(|k| theta.theta(start + k as f64 * step))
        .collect()
}

/// Observations on the uniform grid `t_k = start + k·step`, `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    start: f64,
    step: f64,
    dim: usize,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn new(start: f64, step: f64, dim: usize, values: Vec<f64>) -> Result<Self, CsvError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(CsvError::Shape(format!("step must be positive, got {step}")));
        }
        if dim == 0 || !values.len().is_multiple_of(dim) || values.len() / dim < 2 {
            return Err(CsvError::Shape(format!(
                "need at least two {dim}-dimensional points, got {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(CsvError::Shape(format!("non-finite value {v}")));
        }
        Ok(Trajectory {
            start,
            step,
            dim,
            values,
        })
    }

    /// Scalar path starting at t = 0.
    pub fn scalar(step: f64, values: Vec<f64>) -> Result<Self, CsvError> {
        Self::new(0.0, step, 1, values)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of grid points (n + 1).
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        self.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// First coordinate at index `k`.
    pub fn x(&self, k: usize) -> f64 {
        self.values[k * self.dim]
    }

    pub fn last(&self) -> f64 {
        self.x(self.len() - 1)
    }

    /// First coordinate over the whole grid.
    pub fn column(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.x(k)).collect()
    }

    /// Every `stride`-th point, keeping the first.
    pub fn subsample(&self, stride: usize) -> Result<Trajectory, CsvError> {
        if stride == 0 {
            return Err(CsvError::Shape("stride must be positive".into()));
        }
        let values = (0..self.len())
            .step_by(stride)
            .flat_map(|k| self.row(k).to_vec())
            .collect();
        Trajectory::new(self.start, self.step * stride as f64, self.dim, values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            write!(out, ",x{i}").unwrap();
        }
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&format_real(self.time(k)));
            for v in self.row(k) {
                out.push(',');
                out.push_str(&format_real(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CsvError> {
        let (times, dim, values) = parse_table(text)?;
        if times.len() < 2 {
            return Err(CsvError::Shape("need at least two rows".into()));
        }
        let n = times.len() - 1;
        let start = times[0];
        let step = (times[n] - start) / n as f64;
        for (k, &t) in times.iter().enumerate() {
            let expect = start + k as f64 * step;
            if (t - expect).abs() > 1e-9 * expect.abs().max(1.0) {
                return Err(CsvError::Parse {
                    line: k + 2,
                    msg: format!("time grid is not uniform: {t} vs {expect}"),
                });
            }
        }
        Trajectory::new(start, step, dim, values)
    }
}

fn parse_table(text: &str) -> Result<(Vec<f64>, usize, Vec<f64>), CsvError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(CsvError::Shape("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "t" {
        return Err(CsvError::Parse {
            line: 1,
            msg: format!("expected header 't,x1[,x2…]', got '{header}'"),
        });
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("x{}", i + 1) {
            return Err(CsvError::Parse {
                line: 1,
                msg: format!("unexpected column '{c}'"),
            });
        }
    }
    let dim = cols.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(CsvError::Parse {
                line: i + 1,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| CsvError::Parse {
                line: i + 1,
                msg: format!("'{s}': {e}"),
            })
        };
        times.push(parse(fields[0])?);
        for f in &fields[1..] {
            values.push(parse(f)?);
        }
    }
    Ok((times, dim, values))
}

fn euler_core<C: SdeCoefficients>(
    coeffs: &C,
    table: &[Vec<f64>],
    x0: f64,
    h: f64,
    rng: &mut Rng,
    mut record: impl FnMut(f64),
) -> Result<f64, SimError> {
    let sqrt_h = h.sqrt();
    let mut x = x0;
    record(x);
    for (k, theta) in table.iter().enumerate() {
        let t = k as f64 * h;
        let a = coeffs.drift(t, x, theta);
        let b = coeffs.diffusion(t, x, theta);
        let z = rng.standard_normal();
        x = x + a * h + b * sqrt_h * z;
        if !x.is_finite() || x.abs() > OVERFLOW_LIMIT {
            return Err(SimError::NonFinite { step: k + 1, value: x });
        }
        record(x);
    }
    Ok(x)
}

fn check_grid(horizon: f64, n: usize) -> Result<f64, SimError> {
    if n == 0 {
        return Err(SimError::Invalid("need at least one step".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimError::Invalid(format!("horizon must be positive, got {horizon}")));
    }
    Ok(horizon / n as f64)
}

/// Euler–Maruyama path `x_{k+1} = x_k + a·h + b·√h·Z_k` on `t_k = k·T/n`.
pub fn euler_path<C: SdeCoefficients>(
    coeffs: &C,
    theta: &dyn ThetaProvider,
    x0: f64,
    horizon: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<Trajectory, SimError> {
    let h = check_grid(horizon, n)?;
    let table = tabulate(theta, 0.0, h, n);
    let mut values = Vec::with_capacity(n + 1);
    euler_core(coeffs, &table, x0, h, rng, |x| values.push(x))?;
    Ok(Trajectory::scalar(h, values).expect("finite values on a valid grid"))
}

/// `count` independent paths; path `i` uses stream `i` of `seed`.
pub fn ensemble<C: SdeCoefficients>(
    coeffs: &C,
    theta: &dyn ThetaProvider,
    x0: f64,
    horizon: f64,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, SimError> {
    let h = check_grid(horizon, n)?;
    if count == 0 {
        return Err(SimError::Invalid("ensemble size must be at least 1".into()));
    }
    let table = tabulate(theta, 0.0, h, n);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::new(seed, i as u64);
            let mut values = Vec::with_capacity(n + 1);
            euler_core(coeffs, &table, x0, h, &mut rng, |x| values.push(x)).map_err(|e| SimError::Trajectory {
                index: i,
                source: Box::new(e),
            })?;
            Ok(Trajectory::scalar(h, values).expect("finite values"))
        })
        .collect()
}

/// Endpoints X(T) of [`ensemble`] without storing the paths.
pub fn ensemble_endpoints<C: SdeCoefficients>(
    coeffs: &C,
    theta: &dyn ThetaProvider,
    x0: f64,
    horizon: f64,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>, SimError> {
    let h = check_grid(horizon, n)?;
    if count == 0 {
        return Err(SimError::Invalid("ensemble size must be at least 1".into()));
    }
    let table = tabulate(theta, 0.0, h, n);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::new(seed, i as u64);
            euler_core(coeffs, &table, x0, h, &mut rng, |_| {}).map_err(|e| SimError::Trajectory {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// One path of a model on its native grid.
pub fn simulate_model<C: SdeCoefficients>(
    model: &SdeModelSpec<C>,
    theta: &dyn ThetaProvider,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let mut rng = Rng::new(seed, 0);
    euler_path(&model.coeffs, theta, model.x0, model.horizon, model.steps(), &mut rng)
}

/// Bivariate observations `x_k = μ(t_k) + ε_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub times: Vec<f64>,
    pub obs: Vec<[f64; 2]>,
}

impl RegressionDataset {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x1,x2\n");
        for (t, x) in self.times.iter().zip(&self.obs) {
            writeln!(out, "{},{},{}", format_real(*t), format_real(x[0]), format_real(x[1])).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CsvError> {
        let (times, dim, values) = parse_table(text)?;
        if dim != 2 {
            return Err(CsvError::Shape(format!("expected 2 columns, got {dim}")));
        }
        if times.is_empty() {
            return Err(CsvError::Shape("no observations".into()));
        }
        if let Some(v) = values.iter().chain(&times).find(|v| !v.is_finite()) {
            return Err(CsvError::Shape(format!("non-finite value {v}")));
        }
        let obs = values.chunks(2).map(|c| [c[0], c[1]]).collect();
        Ok(RegressionDataset { times, obs })
    }
}

/// Draws the dataset via the 2-D Cholesky factor of Σ(t_k).
pub fn regression_sample(case: &RegressionCaseSpec, rng: &mut Rng) -> Result<RegressionDataset, SimError> {
    let mut times = Vec::with_capacity(case.n);
    let mut obs = Vec::with_capacity(case.n);
    for k in 0..case.n {
        let t = case.time(k);
        let p = case.params(t);
        let finite = [p.mu1, p.mu2, p.sigma1, p.sigma2, p.rho].iter().all(|v| v.is_finite());
        if !finite || p.rho.abs() > 1.0 {
            return Err(SimError::Covariance {
                k,
                detail: format!("σ₁={}, σ₂={}, ρ={}", p.sigma1, p.sigma2, p.rho),
            });
        }
        let z1 = rng.standard_normal();
        let z2 = rng.standard_normal();
        let e1 = p.sigma1 * z1;
        let e2 = p.sigma2 * (p.rho * z1 + (1.0 - p.rho * p.rho).sqrt() * z2);
        times.push(t);
        obs.push([p.mu1 + e1, p.mu2 + e2]);
    }
    Ok(RegressionDataset { times, obs })
}
