//! One-step Monte Carlo prediction intervals from a fitted parameter function.
//!
//! A single carrier path x̃ is simulated from x̃₀ = x_n. For each step the
//! interval is centred on the Euler drift step from x̃_{k−1} and scaled by the
//! one-step diffusion, so widths do not grow with the horizon.

use std::fmt::Write as _;

use thiserror::Error;

use crate::models::SdeCoefficients;
use crate::neuralnet::format_real;
use crate::simulate::{CsvError, Rng, ThetaProvider, OVERFLOW_LIMIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("carrier path left the finite range at step {step} (value {value})")]
    NonFinite { step: usize, value: f64 },
}

// Acklam's rational approximation of Φ⁻¹.
#[allow(clippy::excessive_precision)]
const A: [f64; 6] = [
    -3.969683028665376e1,
    2.209460984245205e2,
    -2.759285104469687e2,
    1.383577518672690e2,
    -3.066479806614716e1,
    2.506628277459239,
];
#[allow(clippy::excessive_precision)]
const B: [f64; 5] = [
    -5.447609879822406e1,
    1.615858368580409e2,
    -1.556989798598866e2,
    6.680131188771972e1,
    -1.328068155288572e1,
];
#[allow(clippy::excessive_precision)]
const C: [f64; 6] = [
    -7.784894002430293e-3,
    -3.223964580411365e-1,
    -2.400758277161838,
    -2.549732539343734,
    4.374664141464968,
    2.938163982698783,
];
#[allow(clippy::excessive_precision)]
const D: [f64; 4] = [
    7.784695709041462e-3,
    3.224671290700398e-1,
    2.445134137142996,
    3.754408661907416,
];

/// Φ(x) = ½ erfc(−x/√2).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Φ⁻¹(p), refined by one Halley step.
pub fn normal_quantile(p: f64) -> Result<f64, ForecastError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ForecastError::Probability(p));
    }
    const LOW: f64 = 0.02425;
    let x = if p < LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Two-sided multiplier Φ⁻¹((1 + α)/2).
pub fn interval_multiplier(alpha: f64) -> Result<f64, ForecastError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ForecastError::Probability(alpha));
    }
    normal_quantile(0.5 * (1.0 + alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub alpha: f64,
    pub multiplier: f64,
    /// t_1, …, t_N.
    pub times: Vec<f64>,
    pub predictions: Vec<f64>,
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// x̃_0, …, x̃_N.
    pub carrier: Vec<f64>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Same centers and scales at another coverage level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Forecast, ForecastError> {
        let q = interval_multiplier(alpha)?;
        let (lower, upper) = bands(&self.centers, &self.scales, q);
        Ok(Forecast {
            alpha,
            multiplier: q,
            lower,
            upper,
            ..self.clone()
        })
    }

    /// First `n` steps.
    pub fn truncated(&self, n: usize) -> Forecast {
        let n = n.min(self.len());
        Forecast {
            alpha: self.alpha,
            multiplier: self.multiplier,
            times: self.times[..n].to_vec(),
            predictions: self.predictions[..n].to_vec(),
            centers: self.centers[..n].to_vec(),
            scales: self.scales[..n].to_vec(),
            lower: self.lower[..n].to_vec(),
            upper: self.upper[..n].to_vec(),
            carrier: self.carrier[..=n].to_vec(),
        }
    }

    /// `k,t,prediction,lower,upper,center,scale`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,t,prediction,lower,upper,center,scale\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                i + 1,
                format_real(self.times[i]),
                format_real(self.predictions[i]),
                format_real(self.lower[i]),
                format_real(self.upper[i]),
                format_real(self.centers[i]),
                format_real(self.scales[i]),
            );
        }
        s
    }
}

/// Rows of a forecast CSV: `(k, t, prediction, lower, upper, center, scale)`.
pub fn parse_forecast_csv(text: &str) -> Result<Vec<[f64; 7]>, CsvError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "k,t,prediction,lower,upper,center,scale" => {}
        _ => {
            return Err(CsvError::Parse {
                line: 1,
                msg: "expected header k,t,prediction,lower,upper,center,scale".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match cells {
            Ok(c) if c.len() == 7 => rows.push([c[0], c[1], c[2], c[3], c[4], c[5], c[6]]),
            Ok(c) => {
                return Err(CsvError::Parse {
                    line: i + 1,
                    msg: format!("expected 7 columns, found {}", c.len()),
                })
            }
            Err(e) => {
                return Err(CsvError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(rows)
}

fn bands(centers: &[f64], scales: &[f64], q: f64) -> (Vec<f64>, Vec<f64>) {
    centers
        .iter()
        .zip(scales)
        .map(|(&c, &s)| (c - q * s, c + q * s))
        .unzip()
}

struct Steps {
    centers: Vec<f64>,
    scales: Vec<f64>,
    carrier: Vec<f64>,
}

fn carrier_run<C: SdeCoefficients>(
    coeffs: &C,
    table: &[Vec<f64>],
    x_n: f64,
    t_start: f64,
    h: f64,
    rng: &mut Rng,
) -> Result<Steps, ForecastError> {
    let n = table.len() - 1;
    let sh = h.sqrt();
    let mut carrier = Vec::with_capacity(n + 1);
    let mut centers = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut x = x_n;
    carrier.push(x);
    for k in 0..n {
        let t = t_start + k as f64 * h;
        let next = &table[k + 1];
        centers.push(x + coeffs.drift(t, x, next) * h);
        scales.push(sh * coeffs.diffusion(t, x, next).abs());
        let here = &table[k];
        let z = rng.standard_normal();
        x += coeffs.drift(t, x, here) * h + sh * coeffs.diffusion(t, x, here) * z;
        if !x.is_finite() || x.abs() > OVERFLOW_LIMIT {
            return Err(ForecastError::NonFinite { step: k + 1, value: x });
        }
        carrier.push(x);
    }
    Ok(Steps {
        centers,
        scales,
        carrier,
    })
}

fn check(steps: usize, h: f64) -> Result<(), ForecastError> {
    if steps == 0 {
        return Err(ForecastError::Invalid("forecast needs at least one step".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(ForecastError::Invalid(format!("step must be positive, got {h}")));
    }
    Ok(())
}

fn tabulate(theta: &dyn ThetaProvider, t_start: f64, h: f64, steps: usize) -> Vec<Vec<f64>> {
    (0..=steps).map(|k| theta.theta(t_start + k as f64 * h)).collect()
}

/// Forecast `steps` values after the last observation `x_n` taken at `t_start`.
#[allow(clippy::too_many_arguments)]
pub fn mc_forecast<C: SdeCoefficients>(
    coeffs: &C,
    theta: &dyn ThetaProvider,
    x_n: f64,
    t_start: f64,
    steps: usize,
    h: f64,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Forecast, ForecastError> {
    check(steps, h)?;
    let q = interval_multiplier(alpha)?;
    let table = tabulate(theta, t_start, h, steps);
    let run = carrier_run(coeffs, &table, x_n, t_start, h, rng)?;
    let (lower, upper) = bands(&run.centers, &run.scales, q);
    Ok(Forecast {
        alpha,
        multiplier: q,
        times: (1..=steps).map(|k| t_start + k as f64 * h).collect(),
        predictions: run.centers.clone(),
        centers: run.centers,
        scales: run.scales,
        lower,
        upper,
        carrier: run.carrier,
    })
}

/// Centers and scales averaged over `paths` carriers on streams `0..paths` of `seed`.
///
/// The reported carrier is the first one.
#[allow(clippy::too_many_arguments)]
pub fn mc_forecast_ensemble<C: SdeCoefficients>(
    coeffs: &C,
    theta: &dyn ThetaProvider,
    x_n: f64,
    t_start: f64,
    steps: usize,
    h: f64,
    alpha: f64,
    paths: usize,
    seed: u64,
) -> Result<Forecast, ForecastError> {
    check(steps, h)?;
    if paths == 0 {
        return Err(ForecastError::Invalid("need at least one carrier path".into()));
    }
    let q = interval_multiplier(alpha)?;
    let table = tabulate(theta, t_start, h, steps);
    let mut centers = vec![0.0; steps];
    let mut scales = vec![0.0; steps];
    let mut first = None;
    for i in 0..paths {
        let mut rng = Rng::new(seed, i as u64);
        let run = carrier_run(coeffs, &table, x_n, t_start, h, &mut rng)?;
        for k in 0..steps {
            centers[k] += run.centers[k] / paths as f64;
            scales[k] += run.scales[k] / paths as f64;
        }
        first.get_or_insert(run.carrier);
    }
    let (lower, upper) = bands(&centers, &scales, q);
    Ok(Forecast {
        alpha,
        multiplier: q,
        times: (1..=steps).map(|k| t_start + k as f64 * h).collect(),
        predictions: centers.clone(),
        centers,
        scales,
        lower,
        upper,
        carrier: first.unwrap_or_default(),
    })
}
