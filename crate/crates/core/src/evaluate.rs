//! Fit metrics, two-sample comparison and empirical stability constants.

use std::fmt::Write as _;

use thiserror::Error;

use crate::models::{SdeCoefficients, SdeModelSpec};
use crate::neuralnet::format_real;
use crate::simulate::{ensemble_endpoints, tabulate, SimError, ThetaProvider, TrueTheta};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: lengths {left} and {right} differ")]
    Length {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{0} needs a nonempty sample")]
    Empty(&'static str),
    #[error("{0} needs at least two values")]
    TooShort(&'static str),
    #[error("R² is undefined when the reference values have zero variance")]
    ZeroVariance,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("model {0} has no reference parameter function")]
    NoTruth(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn paired(what: &'static str, a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length {
            what,
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::Empty(what));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    paired("mse", y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// `1 − SS_res / SS_tot`.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    paired("r2", y, y_hat)?;
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|a| (a - m).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(EvalError::ZeroVariance);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
}

fn sorted(s: &[f64]) -> Result<Vec<f64>, EvalError> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Two-sample Kolmogorov–Smirnov statistic with its asymptotic p-value.
pub fn ks_two_sample(s1: &[f64], s2: &[f64]) -> Result<KsResult, EvalError> {
    if s1.is_empty() || s2.is_empty() {
        return Err(EvalError::Empty("ks_two_sample"));
    }
    let a = sorted(s1)?;
    let b = sorted(s2)?;
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let lambda = d * ((n * m) as f64 / (n + m) as f64).sqrt();
    Ok(KsResult {
        d,
        p: kolmogorov_survival(lambda),
    })
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if !(lambda > 0.0) {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        // The alternating series converges slowly here; use the theta-function form.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 1..=100 {
            let odd = (2 * k - 1) as f64;
            let term = (-odd * odd * c).exp();
            s += term;
            if term < 1e-12 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-12 {
                break;
            }
        }
        2.0 * s
    };
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

/// Mean and standard deviation with the 1/(N−1) normalisation.
pub fn empirical_moments(samples: &[f64]) -> Result<Moments, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::TooShort("empirical_moments"));
    }
    let m = mean(samples);
    let var = samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    Ok(Moments {
        mean: m,
        std: var.sqrt(),
    })
}

/// Pairs of order statistics `(sort(s1)ᵢ, sort(s2)ᵢ)`.
pub fn qq_points(s1: &[f64], s2: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    paired("qq_points", s1, s2)?;
    let a = sorted(s1)?;
    let b = sorted(s2)?;
    Ok(a.into_iter().zip(b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremConstants {
    /// `√(mean |X_i(T) − X̂_i(T)|²)`.
    pub l: f64,
    /// `2 · max over the grid of |Θ̂ − Θ|`.
    pub r: f64,
    /// `L / R`, undefined when `R = 0`.
    pub c: Option<f64>,
}

/// Root mean square of the paired endpoint differences.
pub fn endpoint_rms(end_true: &[f64], end_fit: &[f64]) -> Result<f64, EvalError> {
    paired("endpoint_rms", end_true, end_fit)?;
    Ok(mse(end_true, end_fit)?.sqrt())
}

/// Delta-method standard error of [`endpoint_rms`].
pub fn endpoint_rms_standard_error(end_true: &[f64], end_fit: &[f64]) -> Result<f64, EvalError> {
    let l = endpoint_rms(end_true, end_fit)?;
    let sq: Vec<f64> = end_true.iter().zip(end_fit).map(|(a, b)| (a - b).powi(2)).collect();
    if sq.len() < 2 {
        return Err(EvalError::TooShort("endpoint_rms_standard_error"));
    }
    if l == 0.0 {
        return Ok(0.0);
    }
    let se_mean = empirical_moments(&sq)?.std / (sq.len() as f64).sqrt();
    Ok(se_mean / (2.0 * l))
}

/// `max_k |a_k − b_k|`.
pub fn sup_norm_diff(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    paired("sup_norm_diff", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `‖a − b‖_{L²}` by the trapezoid rule on a uniform grid of step `h`.
pub fn l2_norm_trapezoid(a: &[f64], b: &[f64], h: f64) -> Result<f64, EvalError> {
    paired("l2_norm_trapezoid", a, b)?;
    if a.len() < 2 {
        return Err(EvalError::TooShort("l2_norm_trapezoid"));
    }
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
    let inner: f64 = sq[1..sq.len() - 1].iter().sum();
    Ok((h * (0.5 * (sq[0] + sq[sq.len() - 1]) + inner)).sqrt())
}

/// L, R and C from coupled endpoints and the parameter values on the grid.
pub fn theorem_constants(
    end_true: &[f64],
    end_fit: &[f64],
    theta_true: &[f64],
    theta_fit: &[f64],
) -> Result<TheoremConstants, EvalError> {
    let l = endpoint_rms(end_true, end_fit)?;
    let r = 2.0 * sup_norm_diff(theta_true, theta_fit)?;
    Ok(TheoremConstants {
        l,
        r,
        c: (r > 0.0).then(|| l / r),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentFit {
    pub name: String,
    pub mse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub components: Vec<ComponentFit>,
    pub ks: KsResult,
    pub true_moments: Moments,
    pub fitted_moments: Moments,
    pub constants: Option<TheoremConstants>,
    pub paths: usize,
}

impl EvalReport {
    /// Compare two endpoint samples, pairing them by index when lengths agree.
    pub fn from_endpoints(end_true: &[f64], end_fit: &[f64]) -> Result<EvalReport, EvalError> {
        let l = if end_true.len() == end_fit.len() {
            Some(endpoint_rms(end_true, end_fit)?)
        } else {
            None
        };
        Ok(EvalReport {
            components: Vec::new(),
            ks: ks_two_sample(end_true, end_fit)?,
            true_moments: empirical_moments(end_true)?,
            fitted_moments: empirical_moments(end_fit)?,
            constants: l.map(|l| TheoremConstants { l, r: 0.0, c: None }),
            paths: end_true.len().min(end_fit.len()),
        })
    }

    /// One `key=value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("paths", self.paths.to_string());
        for c in &self.components {
            kv(&format!("mse_{}", c.name), format_real(c.mse));
            kv(&format!("r2_{}", c.name), format_real(c.r2));
        }
        kv("ks_d", format_real(self.ks.d));
        kv("ks_p", format_real(self.ks.p));
        kv("true_mean", format_real(self.true_moments.mean));
        kv("true_std", format_real(self.true_moments.std));
        kv("fitted_mean", format_real(self.fitted_moments.mean));
        kv("fitted_std", format_real(self.fitted_moments.std));
        if let Some(tc) = self.constants {
            kv("l_emp", format_real(tc.l));
            kv("r_emp", format_real(tc.r));
            kv("c_emp", tc.c.map_or_else(|| "undefined".to_string(), format_real));
        }
        s
    }
}

/// Parse `key=value` lines into pairs, skipping blanks.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn qq_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("true,fitted\n");
    for (a, b) in points {
        let _ = writeln!(s, "{},{}", format_real(*a), format_real(*b));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<usize>>,
}

/// Counts of several samples on common equal-width bins.
pub fn histogram(samples: &[&[f64]], bins: usize) -> Result<Histogram, EvalError> {
    if bins == 0 || samples.iter().all(|s| s.is_empty()) {
        return Err(EvalError::Empty("histogram"));
    }
    if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(EvalError::NonFinite);
    }
    let lo = samples
        .iter()
        .flat_map(|s| s.iter())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut hi = samples
        .iter()
        .flat_map(|s| s.iter())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let w = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + w * i as f64).collect();
    let counts = samples
        .iter()
        .map(|s| {
            let mut c = vec![0; bins];
            for &v in s.iter() {
                let i = (((v - lo) / w) as usize).min(bins - 1);
                c[i] += 1;
            }
            c
        })
        .collect();
    Ok(Histogram { edges, counts })
}

impl Histogram {
    /// `lower,upper,true,fitted` for a two-sample histogram.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = format!("lower,upper,{}\n", names.join(","));
        for b in 0..self.edges.len() - 1 {
            let _ = write!(s, "{},{}", format_real(self.edges[b]), format_real(self.edges[b + 1]));
            for c in &self.counts {
                let _ = write!(s, ",{}", c[b]);
            }
            s.push('\n');
        }
        s
    }
}

/// Everything needed to compare a fitted model with the truth.
#[derive(Debug, Clone)]
pub struct SdeEvaluation {
    pub report: EvalReport,
    pub end_true: Vec<f64>,
    pub end_fit: Vec<f64>,
    pub times: Vec<f64>,
    pub theta_true: Vec<Vec<f64>>,
    pub theta_fit: Vec<Vec<f64>>,
}

/// Coupled ensembles of `paths` endpoints under the true and fitted Θ.
///
/// Path `i` of both ensembles uses stream `i` of `seed`. R is taken over
/// the Euclidean norm of Θ̂ − Θ on the model grid.
pub fn evaluate_sde<C: SdeCoefficients>(
    model: &SdeModelSpec<C>,
    fitted: &dyn ThetaProvider,
    paths: usize,
    seed: u64,
) -> Result<SdeEvaluation, EvalError> {
    let truth = TrueTheta::new(&model.coeffs).ok_or_else(|| EvalError::NoTruth(model.name.clone()))?;
    let n = model.steps();
    let h = model.horizon / n as f64;
    let end_true = ensemble_endpoints(&model.coeffs, &truth, model.x0, model.horizon, n, paths, seed)?;
    let end_fit = ensemble_endpoints(&model.coeffs, fitted, model.x0, model.horizon, n, paths, seed)?;

    let times: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
    let theta_true = tabulate(&truth, 0.0, h, n + 1);
    let theta_fit = tabulate(fitted, 0.0, h, n + 1);

    let mut components = Vec::new();
    for (i, name) in model.coeffs.component_names().into_iter().enumerate() {
        let y: Vec<f64> = theta_true.iter().map(|v| v[i]).collect();
        let y_hat: Vec<f64> = theta_fit.iter().map(|v| v[i]).collect();
        components.push(ComponentFit {
            name,
            mse: mse(&y, &y_hat)?,
            r2: r2(&y, &y_hat)?,
        });
    }

    let gap = theta_true
        .iter()
        .zip(&theta_fit)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let l = endpoint_rms(&end_true, &end_fit)?;
    let r = 2.0 * gap;
    let report = EvalReport {
        components,
        ks: ks_two_sample(&end_true, &end_fit)?,
        true_moments: empirical_moments(&end_true)?,
        fitted_moments: empirical_moments(&end_fit)?,
        constants: Some(TheoremConstants {
            l,
            r,
            c: (r > 0.0).then(|| l / r),
        }),
        paths,
    };
    Ok(SdeEvaluation {
        report,
        end_true,
        end_fit,
        times,
        theta_true,
        theta_fit,
    })
}
