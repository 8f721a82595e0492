//! Built-in calibration problems: four scalar SDEs and three 2-D
//! heteroscedastic regression cases.
//!
//! User models plug in by implementing [`SdeCoefficients`]; everything
//! downstream (simulation, losses, forecasting, evaluation) is generic over it.

use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::Real;
use crate::neuralnet::HeadKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model '{0}' (expected one of ex1, ex2, ex3, ex4_log)")]
    UnknownSde(String),
    #[error("unknown regression case '{0}' (expected one of case1, case2, case3)")]
    UnknownCase(String),
    #[error("horizon {horizon} is not an integer multiple of step {step}")]
    Grid { horizon: f64, step: f64 },
}

/// Drift `a(t, x, θ)` and diffusion `b(t, x, θ)` of a scalar SDE
/// `dX = a dt + b dW` with parameter vector θ = Θ(t).
///
/// `theta` is never empty; constants can be lifted into the right context
/// with `theta[0].constant_like(v)`.
pub trait SdeCoefficients: Send + Sync {
    fn theta_dim(&self) -> usize;
    fn heads(&self) -> Vec<HeadKind>;
    fn component_names(&self) -> Vec<String>;
    fn drift<S: Real>(&self, t: f64, x: f64, theta: &[S]) -> S;
    fn diffusion<S: Real>(&self, t: f64, x: f64, theta: &[S]) -> S;
    /// Ground-truth Θ(t), when known.
    fn true_theta(&self, t: f64) -> Option<Vec<f64>>;
}

/// Signum with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// σ(t) = 2t + 0.4 + 1.5·sin(4t)
pub fn sigma_ou(t: f64) -> f64 {
    2.0 * t + 0.4 + 1.5 * (4.0 * t).sin()
}

/// σ(t) = 2·sin(2πt) + t
pub fn sigma_nonlinear(t: f64) -> f64 {
    2.0 * (2.0 * PI * t).sin() + t
}

/// μ(t) = 7.5·t²·sin(3.5πt)
pub fn mu_black_scholes(t: f64) -> f64 {
    7.5 * t * t * (3.5 * t * PI).sin()
}

/// σ(t) = (3 + 3t² − 3t·sin(3πt)) / 40
pub fn sigma_black_scholes(t: f64) -> f64 {
    (3.0 + 3.0 * t * t - 3.0 * t * (3.0 * t * PI).sin()) / 40.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinSde {
    /// `κ(μ − x) dt + σ(t) dW`, Θ = [σ].
    Ou { kappa: f64, mu: f64 },
    /// `(μ − κ·sign x) dt + σ(t) dW`, Θ = [σ].
    ThresholdOu { kappa: f64, mu: f64 },
    /// `κ·cos x dt + ((sin x + 1.5)·σ(t) + 2) dW`, Θ = [σ].
    Nonlinear { kappa: f64 },
    /// `(μ(t) − σ(t)²/2) dt + σ(t) dW`, Θ = [μ, σ].
    LogBlackScholes,
}

impl SdeCoefficients for BuiltinSde {
    fn theta_dim(&self) -> usize {
        match self {
            BuiltinSde::LogBlackScholes => 2,
            _ => 1,
        }
    }

    fn heads(&self) -> Vec<HeadKind> {
        match self {
            BuiltinSde::Ou { .. } | BuiltinSde::ThresholdOu { .. } => {
                vec![HeadKind::AbsSquareInLoss]
            }
            // σ(t) changes sign and enters b affinely, so it is not a magnitude.
            BuiltinSde::Nonlinear { .. } => vec![HeadKind::Identity],
            BuiltinSde::LogBlackScholes => vec![HeadKind::Identity, HeadKind::AbsSquareInLoss],
        }
    }

    fn component_names(&self) -> Vec<String> {
        match self {
            BuiltinSde::LogBlackScholes => vec!["mu".into(), "sigma".into()],
            _ => vec!["sigma".into()],
        }
    }

    fn drift<S: Real>(&self, _t: f64, x: f64, theta: &[S]) -> S {
        match *self {
            BuiltinSde::Ou { kappa, mu } => theta[0].constant_like(kappa * (mu - x)),
            BuiltinSde::ThresholdOu { kappa, mu } => theta[0].constant_like(mu - kappa * sign(x)),
            BuiltinSde::Nonlinear { kappa } => theta[0].constant_like(kappa * x.cos()),
            BuiltinSde::LogBlackScholes => theta[0] - theta[1].square() * 0.5,
        }
    }

    fn diffusion<S: Real>(&self, _t: f64, x: f64, theta: &[S]) -> S {
        match *self {
            BuiltinSde::Ou { .. } | BuiltinSde::ThresholdOu { .. } => theta[0],
            BuiltinSde::Nonlinear { .. } => theta[0] * (x.sin() + 1.5) + 2.0,
            BuiltinSde::LogBlackScholes => theta[1],
        }
    }

    fn true_theta(&self, t: f64) -> Option<Vec<f64>> {
        Some(match self {
            BuiltinSde::Ou { .. } | BuiltinSde::ThresholdOu { .. } => vec![sigma_ou(t)],
            BuiltinSde::Nonlinear { .. } => vec![sigma_nonlinear(t)],
            BuiltinSde::LogBlackScholes => vec![mu_black_scholes(t), sigma_black_scholes(t)],
        })
    }
}

/// A scalar SDE together with its observation setup.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeModelSpec<C> {
    pub name: String,
    pub coeffs: C,
    pub known_constants: Vec<(String, f64)>,
    pub x0: f64,
    pub horizon: f64,
    pub step: f64,
}

impl<C: SdeCoefficients> SdeModelSpec<C> {
    pub fn new(name: &str, coeffs: C, x0: f64, horizon: f64, step: f64) -> Result<Self, ModelError> {
        let spec = SdeModelSpec {
            name: name.to_string(),
            coeffs,
            known_constants: Vec::new(),
            x0,
            horizon,
            step,
        };
        spec.try_steps()?;
        Ok(spec)
    }

    fn try_steps(&self) -> Result<usize, ModelError> {
        let ratio = self.horizon / self.step;
        let n = ratio.round();
        if !(n >= 1.0) || (ratio - n).abs() > 1e-6 * n {
            return Err(ModelError::Grid {
                horizon: self.horizon,
                step: self.step,
            });
        }
        Ok(n as usize)
    }

    /// Number of Euler steps `n = T / h`.
    pub fn steps(&self) -> usize {
        self.try_steps().expect("grid validated at construction")
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.known_constants.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub const SDE_NAMES: [&str; 4] = ["ex1", "ex2", "ex3", "ex4_log"];

pub fn builtin_sde(name: &str) -> Result<SdeModelSpec<BuiltinSde>, ModelError> {
    let (coeffs, consts, x0, horizon, step) = match name {
        "ex1" => (
            BuiltinSde::Ou { kappa: 2.0, mu: 0.5 },
            vec![("kappa", 2.0), ("mu", 0.5)],
            1.0,
            2.0,
            0.0002,
        ),
        "ex2" => (
            BuiltinSde::ThresholdOu { kappa: 2.0, mu: 0.5 },
            vec![("kappa", 2.0), ("mu", 0.5)],
            1.0,
            2.0,
            0.0002,
        ),
        "ex3" => (
            BuiltinSde::Nonlinear { kappa: 0.4 },
            vec![("kappa", 0.4)],
            1.2,
            3.8,
            0.00038,
        ),
        "ex4_log" => (BuiltinSde::LogBlackScholes, vec![], 1.2, 1.2, 0.000015),
        other => return Err(ModelError::UnknownSde(other.to_string())),
    };
    let mut spec = SdeModelSpec::new(name, coeffs, x0, horizon, step)?;
    spec.known_constants = consts.into_iter().map(|(n, v)| (n.to_string(), v)).collect();
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionCase {
    /// Constant covariance.
    ConstantCovariance,
    /// Variances scale with |μᵢ(t)|², constant correlation.
    ScaledVariance,
    /// Variances scale with |μᵢ(t)|, time-dependent correlation.
    TimeVaryingCorrelation,
}

/// Θ(t) = [μ₁, μ₂, σ₁, σ₂, ρ] of the bivariate regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionParams {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
}

impl RegressionParams {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.mu1, self.mu2, self.sigma1, self.sigma2, self.rho]
    }

    pub fn covariance(self) -> [[f64; 2]; 2] {
        let off = self.rho * self.sigma1 * self.sigma2;
        [[self.sigma1 * self.sigma1, off], [off, self.sigma2 * self.sigma2]]
    }

    pub fn is_positive_definite(self) -> bool {
        self.sigma1 > 0.0 && self.sigma2 > 0.0 && self.rho.abs() < 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionCaseSpec {
    pub name: String,
    pub case: RegressionCase,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub n: usize,
}

pub const REGRESSION_COMPONENTS: [&str; 5] = ["mu1", "mu2", "sigma1", "sigma2", "rho"];

impl RegressionCaseSpec {
    pub fn heads() -> Vec<HeadKind> {
        vec![
            HeadKind::Identity,
            HeadKind::Identity,
            HeadKind::AbsSquareInLoss,
            HeadKind::AbsSquareInLoss,
            HeadKind::TanhCorrelation,
        ]
    }

    /// t_k = k·2π/n, k = 0..n−1.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * 2.0 * PI / self.n as f64
    }

    pub fn mean(&self, t: f64) -> [f64; 2] {
        [0.5 + t.sin(), t.cos()]
    }

    pub fn params(&self, t: f64) -> RegressionParams {
        let [mu1, mu2] = self.mean(t);
        let (sigma1, sigma2, rho) = match self.case {
            RegressionCase::ConstantCovariance => (self.sigma1, self.sigma2, self.rho),
            RegressionCase::ScaledVariance => (self.sigma1 * mu1.abs(), self.sigma2 * mu2.abs(), self.rho),
            RegressionCase::TimeVaryingCorrelation => (
                self.sigma1 * mu1.abs().sqrt(),
                self.sigma2 * mu2.abs().sqrt(),
                self.rho * mu1.abs().sqrt() * mu2.abs().sqrt(),
            ),
        };
        RegressionParams {
            mu1,
            mu2,
            sigma1,
            sigma2,
            rho,
        }
    }
}

pub const CASE_NAMES: [&str; 3] = ["case1", "case2", "case3"];

pub fn builtin_regression(name: &str) -> Result<RegressionCaseSpec, ModelError> {
    let case = match name {
        "case1" => RegressionCase::ConstantCovariance,
        "case2" => RegressionCase::ScaledVariance,
        "case3" => RegressionCase::TimeVaryingCorrelation,
        other => return Err(ModelError::UnknownCase(other.to_string())),
    };
    Ok(RegressionCaseSpec {
        name: name.to_string(),
        case,
        sigma1: 0.1,
        sigma2: 0.15,
        rho: 0.5,
        n: 3000,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::Rng;

    #[test]
    fn ex1_values() {
        let m = builtin_sde("ex1").unwrap();
        assert_eq!(m.coeffs.drift(0.3, 1.0, &[1.0]), -1.0);
        assert_eq!(m.coeffs.true_theta(0.0).unwrap(), vec![0.4]);
        assert_eq!(m.steps(), 10_000);
        assert_eq!(m.constant("kappa"), Some(2.0));
    }

    #[test]
    fn ex2_sign_at_zero() {
        let m = builtin_sde("ex2").unwrap();
        assert_eq!(m.coeffs.drift(0.0, 0.0, &[1.0]), 0.5);
        assert_eq!(m.coeffs.drift(0.0, 3.0, &[1.0]), 0.5 - 2.0);
        assert_eq!(m.coeffs.drift(0.0, -3.0, &[1.0]), 0.5 + 2.0);
    }

    #[test]
    fn ex4_sigma_at_zero_and_grid() {
        let m = builtin_sde("ex4_log").unwrap();
        let th = m.coeffs.true_theta(0.0).unwrap();
        assert!((th[1] - 0.075).abs() < 1e-15);
        assert_eq!(m.steps(), 80_000);
        // drift μ − σ²/2
        assert!((m.coeffs.drift(0.0, 0.0, &[1.0, 2.0]) - (1.0 - 2.0)).abs() < 1e-15);
        assert_eq!(builtin_sde("ex3").unwrap().steps(), 10_000);
    }

    #[test]
    fn unknown_names() {
        assert!(matches!(builtin_sde("nope"), Err(ModelError::UnknownSde(_))));
        assert!(matches!(builtin_regression("case9"), Err(ModelError::UnknownCase(_))));
    }

    #[test]
    fn bad_grid_rejected() {
        let r = SdeModelSpec::new("x", BuiltinSde::LogBlackScholes, 0.0, 1.0, 0.3);
        assert!(matches!(r, Err(ModelError::Grid { .. })));
    }

    #[test]
    fn diffusion_is_nondegenerate_on_random_points() {
        let mut rng = Rng::new(99, 0);
        for name in SDE_NAMES {
            let m = builtin_sde(name).unwrap();
            for _ in 0..1000 {
                let t = rng.uniform_range(0.0, m.horizon);
                let x = rng.uniform_range(-10.0, 10.0);
                let th = m.coeffs.true_theta(t).unwrap();
                let b = m.coeffs.diffusion(t, x, &th);
                assert!(b * b > 0.0, "{name} degenerate at t={t}, x={x}");
            }
        }
    }

    #[test]
    fn sigma_has_no_root_on_the_ou_grid() {
        let m = builtin_sde("ex1").unwrap();
        let min = (0..=m.steps())
            .map(|k| sigma_ou(m.time(k)).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(min >= 0.4 - 1e-12, "min |σ| = {min}");
        let m4 = builtin_sde("ex4_log").unwrap();
        let min4 = (0..=m4.steps())
            .map(|k| sigma_black_scholes(m4.time(k)))
            .fold(f64::INFINITY, f64::min);
        assert!(min4 > 0.0);
    }

    #[test]
    fn regression_case_values() {
        let c1 = builtin_regression("case1").unwrap();
        for t in [0.0, 1.0, 4.0] {
            let cov = c1.params(t).covariance();
            assert!((cov[0][1] - 0.0075).abs() < 1e-15);
        }
        let c2 = builtin_regression("case2").unwrap();
        for k in 0..c2.n {
            assert_eq!(c2.params(c2.time(k)).rho, 0.5);
        }
        let c3 = builtin_regression("case3").unwrap();
        let t = PI / 6.0; // μ₁ = 0.5 + 0.5 = 1
        let p = c3.params(t);
        assert!((p.mu1 - 1.0).abs() < 1e-12);
        assert!((p.sigma1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn regression_covariances_are_positive_definite_on_grid() {
        for name in CASE_NAMES {
            let c = builtin_regression(name).unwrap();
            for k in 0..c.n {
                let p = c.params(c.time(k));
                let cov = p.covariance();
                let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
                let trace = cov[0][0] + cov[1][1];
                assert!(p.is_positive_definite(), "{name} k={k}");
                assert!(det > 0.0 && trace > 0.0, "{name} k={k} det={det}");
            }
        }
    }
}
