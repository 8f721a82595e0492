//! Negative log-(quasi-)likelihoods minimised over the network weights.
//!
//! All losses are index sums, so evaluating them over a subset of indices
//! gives the exact minibatch contribution. Additive `ln 2π` constants are
//! kept.

use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::{AdError, Real};
use crate::models::SdeCoefficients;
use crate::simulate::{RegressionDataset, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("singular diffusion (b·bᵀ = 0) at transition {k}")]
    SingularDiffusion { k: usize },
    #[error("correlation out of range at index {k}: 1 − ρ² = {value}")]
    Correlation { k: usize, value: f64 },
    #[error("index {k}: {source}")]
    Domain {
        k: usize,
        #[source]
        source: AdError,
    },
    #[error("transition variance {value} is not positive at transition {k}")]
    Variance { k: usize, value: f64 },
    #[error("index {k} out of range ({len} terms)")]
    Index { k: usize, len: usize },
    #[error("loss over an empty index set")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

fn sum_terms<S: Real>(indices: &[usize], mut term: impl FnMut(usize) -> Result<S, LossError>) -> Result<S, LossError> {
    let (&first, rest) = indices.split_first().ok_or(LossError::Empty)?;
    let mut total = term(first)?;
    for &k in rest {
        total = total + term(k)?;
    }
    Ok(total)
}

/// `½[ln(2π·var) + resid²/var]` for residual `dx − mean`.
pub fn gaussian_nll_1d<S: Real>(resid: S, var: S) -> Result<S, AdError> {
    Ok(((var * (2.0 * PI)).try_ln()? + resid.square() / var) * 0.5)
}

/// One Euler transition term
/// `½[ln(2π·h·b²) + (Δx − a·h)²/(h·b²)]` at index `k`.
pub fn sde_transition_term<C: SdeCoefficients, S: Real>(
    coeffs: &C,
    k: usize,
    t: f64,
    x: f64,
    dx: f64,
    h: f64,
    theta: &[S],
) -> Result<S, LossError> {
    let a = coeffs.drift(t, x, theta);
    let b = coeffs.diffusion(t, x, theta);
    let b2 = b.square();
    if !(b2.value() > 0.0) {
        return Err(LossError::SingularDiffusion { k });
    }
    let resid = a * (-h) + dx;
    gaussian_nll_1d(resid, b2 * h).map_err(|source| LossError::Domain { k, source })
}

/// Euler quasi-NLL summed over the transitions in `indices`.
///
/// `theta_at(k)` must return Θ(t_k) with heads applied.
pub fn sde_quasi_nll<C, S, F>(coeffs: &C, traj: &Trajectory, indices: &[usize], mut theta_at: F) -> Result<S, LossError>
where
    C: SdeCoefficients,
    S: Real,
    F: FnMut(usize) -> Vec<S>,
{
    let n = traj.n_transitions();
    let h = traj.step();
    sum_terms(indices, |k| {
        if k >= n {
            return Err(LossError::Index { k, len: n });
        }
        let theta = theta_at(k);
        let x = traj.x(k);
        let dx = traj.x(k + 1) - x;
        sde_transition_term(coeffs, k, traj.time(k), x, dx, h, &theta)
    })
}

/// Full quasi-NLL in plain arithmetic.
pub fn sde_quasi_nll_value<C: SdeCoefficients>(
    coeffs: &C,
    traj: &Trajectory,
    theta: impl Fn(f64) -> Vec<f64>,
) -> Result<f64, LossError> {
    let all: Vec<usize> = (0..traj.n_transitions()).collect();
    sde_quasi_nll(coeffs, traj, &all, |k| theta(traj.time(k)))
}

/// Bivariate normal NLL term for Θ = [μ₁, μ₂, σ₁, σ₂, ρ] at index `k`:
/// `ln(2π|σ₁||σ₂|√(1−ρ²)) + (z₁² + z₂² − 2ρz₁z₂) / (2(1−ρ²))`.
pub fn regression_term<S: Real>(k: usize, theta: &[S], x: [f64; 2]) -> Result<S, LossError> {
    let [mu1, mu2, s1, s2, rho] = [theta[0], theta[1], theta[2], theta[3], theta[4]];
    let one_minus = (rho.square() * -1.0) + 1.0;
    if !(one_minus.value() > 0.0) {
        return Err(LossError::Correlation {
            k,
            value: one_minus.value(),
        });
    }
    let s1 = s1.abs();
    let s2 = s2.abs();
    let z1 = (mu1 * -1.0 + x[0]) / s1;
    let z2 = (mu2 * -1.0 + x[1]) / s2;
    let dom = |source| LossError::Domain { k, source };
    let log_norm = s1.try_ln().map_err(dom)?
        + s2.try_ln().map_err(dom)?
        + one_minus.try_ln().map_err(dom)? * 0.5
        + (2.0 * PI).ln();
    let quad = (z1.square() + z2.square() - rho * z1 * z2 * 2.0) / (one_minus * 2.0);
    Ok(log_norm + quad)
}

/// Regression NLL summed over `indices`; `theta_at(k)` returns Θ(t_k) after heads.
pub fn regression_nll_2d<S, F>(data: &RegressionDataset, indices: &[usize], mut theta_at: F) -> Result<S, LossError>
where
    S: Real,
    F: FnMut(usize) -> Vec<S>,
{
    let n = data.len();
    sum_terms(indices, |k| {
        if k >= n {
            return Err(LossError::Index { k, len: n });
        }
        regression_term(k, &theta_at(k), data.obs[k])
    })
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let m = order.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..order {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = order as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[order - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

pub const OU_QUADRATURE_ORDER: usize = 64;

/// `∫_{t0}^{t1} θ₂(u)² e^{−2θ₁(t1−u)} du` by Gauss–Legendre quadrature.
pub fn ou_transition_variance(
    theta1: f64,
    theta2: &impl Fn(f64) -> f64,
    t0: f64,
    t1: f64,
    rule: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let half = 0.5 * (t1 - t0);
    let mid = 0.5 * (t1 + t0);
    rule.0
        .iter()
        .zip(&rule.1)
        .map(|(&z, &w)| {
            let u = mid + half * z;
            let s = theta2(u);
            w * s * s * (-2.0 * theta1 * (t1 - u)).exp()
        })
        .sum::<f64>()
        * half
}

/// Exact NLL of `dX = −θ₁X dt + θ₂(t) dW` observed on `traj`.
pub fn ou_exact_nll(theta1: f64, theta2: impl Fn(f64) -> f64, traj: &Trajectory) -> Result<f64, LossError> {
    if !(theta1 > 0.0) {
        return Err(LossError::Invalid(format!("θ₁ must be positive, got {theta1}")));
    }
    let rule = gauss_legendre(OU_QUADRATURE_ORDER);
    let decay = (-theta1 * traj.step()).exp();
    let mut total = 0.0;
    for k in 0..traj.n_transitions() {
        let v = ou_transition_variance(theta1, &theta2, traj.time(k), traj.time(k + 1), &rule);
        if !(v > 0.0) {
            return Err(LossError::Variance { k, value: v });
        }
        let r = traj.x(k + 1) - decay * traj.x(k);
        total += 0.5 * ((2.0 * PI * v).ln() + r * r / v);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::models::{builtin_sde, BuiltinSde};
    use crate::neuralnet::HeadKind;

    struct Driftless;

    /// `dX = a dt + θ dW` with a constant drift stored in Θ[1].
    impl SdeCoefficients for Driftless {
        fn theta_dim(&self) -> usize {
            2
        }
        fn heads(&self) -> Vec<HeadKind> {
            vec![HeadKind::AbsSquareInLoss, HeadKind::Identity]
        }
        fn component_names(&self) -> Vec<String> {
            vec!["b".into(), "a".into()]
        }
        fn drift<S: Real>(&self, _t: f64, _x: f64, th: &[S]) -> S {
            th[1]
        }
        fn diffusion<S: Real>(&self, _t: f64, _x: f64, th: &[S]) -> S {
            th[0]
        }
        fn true_theta(&self, _t: f64) -> Option<Vec<f64>> {
            None
        }
    }

    fn two_point(h: f64, x0: f64, x1: f64) -> Trajectory {
        Trajectory::scalar(h, vec![x0, x1]).unwrap()
    }

    #[test]
    fn quadratic_vanishes_when_increment_equals_drift() {
        let traj = two_point(0.01, 1.0, 1.0 + 0.7 * 0.01);
        let v: f64 = sde_quasi_nll(&Driftless, &traj, &[0], |_| vec![1.0, 0.7]).unwrap();
        assert!((v - 0.5 * (2.0 * PI * 0.01).ln()).abs() < 1e-12);
        assert!((v - (-1.3836466)).abs() < 1e-6);
    }

    #[test]
    fn hand_evaluated_transition_term() {
        let traj = two_point(0.1, 0.0, 0.3);
        let v: f64 = sde_quasi_nll(&Driftless, &traj, &[0], |_| vec![2.0, 0.0]).unwrap();
        let expect = 0.5 * ((2.0 * PI * 0.1 * 4.0).ln() + 0.09 / (0.1 * 4.0));
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn log_det_scaling() {
        let h = 0.05;
        let a = -0.3;
        let values: Vec<f64> = (0..6).map(|k| 1.0 + a * h * k as f64).collect();
        let traj = Trajectory::scalar(h, values).unwrap();
        let all: Vec<usize> = (0..5).collect();
        let base: f64 = sde_quasi_nll(&Driftless, &traj, &all, |_| vec![1.3, a]).unwrap();
        let c: f64 = -2.5;
        let scaled: f64 = sde_quasi_nll(&Driftless, &traj, &all, |_| vec![1.3 * c, a]).unwrap();
        assert!((scaled - base - 5.0 * c.abs().ln()).abs() < 1e-12);
    }

    #[test]
    fn singular_diffusion_names_the_transition() {
        let traj = Trajectory::scalar(0.1, vec![0.0, 0.1, 0.2]).unwrap();
        let r: Result<f64, _> = sde_quasi_nll(&Driftless, &traj, &[0, 1], |k| {
            vec![if k == 1 { 0.0 } else { 1.0 }, 0.0]
        });
        assert_eq!(r, Err(LossError::SingularDiffusion { k: 1 }));
        let empty: Result<f64, _> = sde_quasi_nll(&Driftless, &traj, &[], |_| vec![1.0, 0.0]);
        assert_eq!(empty, Err(LossError::Empty));
        let oob: Result<f64, _> = sde_quasi_nll(&Driftless, &traj, &[2], |_| vec![1.0, 0.0]);
        assert!(matches!(oob, Err(LossError::Index { .. })));
    }

    #[test]
    fn sign_flip_of_diffusion_is_invisible() {
        let m = builtin_sde("ex1").unwrap();
        let traj = Trajectory::scalar(0.01, vec![1.0, 1.05, 0.98, 1.01]).unwrap();
        let all = [0, 1, 2];
        let pos: f64 = sde_quasi_nll(&m.coeffs, &traj, &all, |k| vec![0.5 + k as f64]).unwrap();
        let neg: f64 = sde_quasi_nll(&m.coeffs, &traj, &all, |k| vec![-(0.5 + k as f64)]).unwrap();
        assert_eq!(pos, neg);
    }

    #[test]
    fn independent_regression_term_factorises() {
        let th = [0.2, -0.1, 0.7, 1.4, 0.0];
        let x = [0.5, 0.3];
        let v: f64 = regression_term(0, &th, x).unwrap();
        let g = |r: f64, s: f64| 0.5 * (2.0 * PI * s * s).ln() + 0.5 * (r / s).powi(2);
        let expect = g(x[0] - th[0], th[2]) + g(x[1] - th[1], th[3]);
        assert!((v - expect).abs() < 1e-12);
        let at_mean: f64 = regression_term(0, &[1.0, 2.0, 1.0, 1.0, 0.0], [1.0, 2.0]).unwrap();
        assert!((at_mean - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((at_mean - 1.837877).abs() < 1e-6);
    }

    #[test]
    fn correlated_regression_term_matches_bivariate_density() {
        // Density by explicit Σ⁻¹ and det Σ.
        let (s1, s2, rho) = (1.0f64, 2.0f64, 0.5f64);
        let cov = [[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let r = [1.0, 1.0];
        let q = r[0] * (inv[0][0] * r[0] + inv[0][1] * r[1]) + r[1] * (inv[1][0] * r[0] + inv[1][1] * r[1]);
        let density = (-0.5 * q).exp() / (2.0 * PI * det.sqrt());
        let v: f64 = regression_term(0, &[0.0, 0.0, s1, s2, rho], [1.0, 1.0]).unwrap();
        assert!((v - (-density.ln())).abs() < 1e-12);
        // σ sign does not matter
        let flipped: f64 = regression_term(0, &[0.0, 0.0, -s1, -s2, rho], [1.0, 1.0]).unwrap();
        assert_eq!(v, flipped);
    }

    #[test]
    fn degenerate_correlation_is_rejected() {
        let r: Result<f64, _> = regression_term(3, &[0.0, 0.0, 1.0, 1.0, 1.0], [0.0, 0.0]);
        assert!(matches!(r, Err(LossError::Correlation { k: 3, .. })));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre(64);
        let s: f64 = rule.1.iter().sum();
        assert!((s - 2.0).abs() < 1e-13);
        // ∫ x^10 over [−1, 1] = 2/11
        let v: f64 = rule.0.iter().zip(&rule.1).map(|(x, w)| w * x.powi(10)).sum();
        assert!((v - 2.0 / 11.0).abs() < 1e-14);
        let small = gauss_legendre(5);
        assert!(small.0.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ou_variance_matches_closed_form() {
        let rule = gauss_legendre(OU_QUADRATURE_ORDER);
        for (theta1, c, h) in [(2.0, 1.5, 0.1), (0.3, 0.7, 1.0), (5.0, 2.0, 0.01)] {
            let v = ou_transition_variance(theta1, &|_| c, 0.4, 0.4 + h, &rule);
            let exact = c * c * (1.0 - (-2.0 * theta1 * h).exp()) / (2.0 * theta1);
            assert!((v - exact).abs() < 1e-10, "{v} vs {exact}");
        }
    }

    #[test]
    fn ou_exact_approaches_driftless_quasi_nll_as_rate_vanishes() {
        let c = 0.8;
        let traj = Trajectory::scalar(0.01, vec![0.0, 0.05, -0.02, 0.03, 0.1]).unwrap();
        let exact = ou_exact_nll(1e-9, |_| c, &traj).unwrap();
        let quasi = sde_quasi_nll_value(&Driftless, &traj, |_| vec![c, 0.0]).unwrap();
        assert!((exact - quasi).abs() < 1e-6, "{exact} vs {quasi}");
        assert!(ou_exact_nll(0.0, |_| c, &traj).is_err());
        assert!(matches!(
            ou_exact_nll(1.0, |_| 0.0, &traj),
            Err(LossError::Variance { k: 0, .. })
        ));
    }

    #[test]
    fn minibatch_terms_add_up() {
        let m = builtin_sde("ex1").unwrap();
        let traj = Trajectory::scalar(0.01, vec![1.0, 1.05, 0.98, 1.01, 0.9, 0.95]).unwrap();
        let theta = |k: usize| vec![0.8 + 0.1 * k as f64];
        let a: f64 = sde_quasi_nll(&m.coeffs, &traj, &[0, 3], theta).unwrap();
        let b: f64 = sde_quasi_nll(&m.coeffs, &traj, &[1, 2, 4], theta).unwrap();
        let all: f64 = sde_quasi_nll(&m.coeffs, &traj, &[0, 1, 2, 3, 4], theta).unwrap();
        assert!((a + b - all).abs() < 1e-12);
    }

    #[test]
    fn tape_and_plain_losses_agree() {
        let coeffs = BuiltinSde::LogBlackScholes;
        let traj = Trajectory::scalar(0.01, vec![0.1, 0.12, 0.09]).unwrap();
        let plain: f64 = sde_quasi_nll(&coeffs, &traj, &[0, 1], |_| vec![0.4, 0.3]).unwrap();
        let tape = Tape::new();
        let mu = tape.var(0.4);
        let sigma = tape.var(0.3);
        let on_tape = sde_quasi_nll(&coeffs, &traj, &[0, 1], |_| vec![mu, sigma]).unwrap();
        assert!((on_tape.value() - plain).abs() < 1e-12);
    }
}
