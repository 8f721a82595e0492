//! Minibatch Adam over the network weights.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::likelihood::{regression_nll_2d, sde_quasi_nll, LossError};
use crate::models::{RegressionCaseSpec, SdeCoefficients};
use crate::neuralnet::{mlp_init, theta_at, HeadKind, MlpSpec, Weights};
use crate::simulate::{RegressionDataset, Rng, Trajectory};

/// Loss terms evaluated on one tape. Fixed, so results never depend on thread count.
pub const GRADIENT_CHUNK: usize = 32;

const SHUFFLE_STREAM: u64 = 0x7368_7566;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Loss {
        epoch: usize,
        batch: usize,
        #[source]
        source: LossError,
    },
    #[error("epoch {epoch}, batch {batch}: non-finite loss or gradient")]
    NonFinite { epoch: usize, batch: usize },
    #[error("checkpoint at epoch {epoch}: {msg}")]
    Checkpoint { epoch: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Fraction of indices held out for validation.
    pub validation_fraction: Option<f64>,
    /// Stop after this many epochs without validation improvement.
    pub early_stopping_patience: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed,
            shuffle: true,
            validation_fraction: None,
            early_stopping_patience: None,
            checkpoint_every: None,
        }
    }

    /// Batch size and epoch count used for the reference experiments.
    pub fn reference(name: &str, seed: u64) -> Option<Self> {
        let (b, e) = match name {
            "ex1" => (64, 1000),
            "ex2" => (64, 100),
            "ex3" => (4, 1050),
            "ex4_log" => (228, 1000),
            "case1" | "case2" | "case3" => (16, 1000),
            _ => return None,
        };
        Some(Self::new(b, e, seed))
    }

    pub fn validate(&self, n_terms: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size > n_terms {
            return bad(format!("batch size {} must lie in 1..={n_terms}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("validation fraction must lie in (0, 1), got {f}"));
            }
            let held = Self::held_out(n_terms, f);
            if held == 0 || n_terms - held < self.batch_size {
                return bad(format!(
                    "validation fraction {f} leaves too few terms for batch size {}",
                    self.batch_size
                ));
            }
        }
        if self.early_stopping_patience.is_some() && self.validation_fraction.is_none() {
            return bad("early stopping needs a validation fraction".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be at least 1".into());
        }
        Ok(())
    }

    fn held_out(n_terms: usize, fraction: f64) -> usize {
        (n_terms as f64 * fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(state: &mut AdamState, weights: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
    assert!(
        weights.len() == grads.len() && state.m.len() == grads.len(),
        "adam_step: length mismatch"
    );
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        weights[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub weights: Weights,
    /// Mean per-term training loss of each epoch.
    pub loss_history: Vec<f64>,
    pub validation_history: Vec<f64>,
    pub epochs_run: usize,
    pub wall_time: Duration,
}

/// Pins the higher-ranked signature of a loss-building closure.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[usize]) -> Result<Var<'t>, LossError> + Sync,
{
    f
}

/// Loss value and gradient of the sum of terms in `indices`.
///
/// Terms are split into fixed chunks with one tape each; chunk results are
/// added in index order.
pub fn loss_and_gradient<F>(
    weights: &[f64],
    indices: &[usize],
    builder: &F,
    with_gradient: bool,
) -> Result<(f64, Vec<f64>), LossError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[usize]) -> Result<Var<'t>, LossError> + Sync,
{
    let parts: Vec<Result<(f64, Vec<f64>), LossError>> = indices
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let w: Vec<Var> = weights.iter().map(|&v| tape.var(v)).collect();
            let loss = builder(&tape, &w, chunk)?;
            let grad = if with_gradient {
                let g = tape.backward(loss.node());
                w.iter().map(|v| g.wrt(v.node())).collect()
            } else {
                Vec::new()
            };
            Ok((loss.value(), grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; if with_gradient { weights.len() } else { 0 }];
    for part in parts {
        let (v, g) = part?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Minimise `Σ_k term_k(w)` over `n_terms` indices starting from `init`.
pub fn fit<F>(cfg: &TrainConfig, init: Weights, n_terms: usize, builder: F) -> Result<FitResult, TrainError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[usize]) -> Result<Var<'t>, LossError> + Sync,
{
    fit_with_observer(cfg, init, n_terms, builder, |_, _, _| Ok(()))
}

/// [`fit`] calling `observer(epoch, weights, loss)` every `checkpoint_every` epochs.
pub fn fit_with_observer<F, O>(
    cfg: &TrainConfig,
    init: Weights,
    n_terms: usize,
    builder: F,
    mut observer: O,
) -> Result<FitResult, TrainError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[usize]) -> Result<Var<'t>, LossError> + Sync,
    O: FnMut(usize, &Weights, f64) -> Result<(), String>,
{
    cfg.validate(n_terms)?;
    let started = Instant::now();
    let mut rng = Rng::new(cfg.seed, SHUFFLE_STREAM);

    let mut order: Vec<usize> = (0..n_terms).collect();
    let mut held: Vec<usize> = Vec::new();
    if let Some(f) = cfg.validation_fraction {
        rng.shuffle(&mut order);
        let cut = n_terms - TrainConfig::held_out(n_terms, f);
        held = order.split_off(cut);
        order.sort_unstable();
        held.sort_unstable();
    }
    let n_train = order.len();

    let mut weights = init.0;
    let mut state = AdamState::new(weights.len());
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut validation_history = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut epoch_total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (value, grad) = loss_and_gradient(&weights, idx, &builder, true)
                .map_err(|source| TrainError::Loss { epoch, batch, source })?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            adam_step(&mut state, &mut weights, &grad, cfg);
            epoch_total += value;
        }
        let epoch_loss = epoch_total / n_train as f64;
        loss_history.push(epoch_loss);

        if !held.is_empty() {
            let (v, _) = loss_and_gradient(&weights, &held, &builder, false).map_err(|source| TrainError::Loss {
                epoch,
                batch: 0,
                source,
            })?;
            let v = v / held.len() as f64;
            validation_history.push(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, weights.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }

        if let Some(every) = cfg.checkpoint_every {
            if (epoch + 1) % every == 0 {
                let snapshot = Weights(weights.clone());
                observer(epoch + 1, &snapshot, epoch_loss)
                    .map_err(|msg| TrainError::Checkpoint { epoch: epoch + 1, msg })?;
            }
        }

        if let Some(patience) = cfg.early_stopping_patience {
            if since_best >= patience {
                break;
            }
        }
    }

    if cfg.early_stopping_patience.is_some() {
        if let Some((_, w)) = best {
            weights = w;
        }
    }

    Ok(FitResult {
        weights: Weights(weights),
        epochs_run: loss_history.len(),
        loss_history,
        validation_history,
        wall_time: started.elapsed(),
    })
}

fn set_output_biases(spec: &MlpSpec, weights: &mut Weights, values: &[f64]) {
    for (head, &v) in values.iter().enumerate() {
        weights.0[spec.output_bias_index(head)] = v;
    }
}

/// Realized volatility `√(Σ Δx² / (n·h))`.
pub fn realized_volatility(traj: &Trajectory) -> f64 {
    let n = traj.n_transitions();
    let ss: f64 = (0..n).map(|k| (traj.x(k + 1) - traj.x(k)).powi(2)).sum();
    (ss / (n as f64 * traj.step())).sqrt()
}

/// Initial weights for an SDE fit: magnitude heads start at the realized
/// volatility so the diffusion is nonzero everywhere on the first pass.
pub fn sde_initial_weights(spec: &MlpSpec, traj: &Trajectory, seed: u64) -> Weights {
    let mut w = mlp_init(spec, seed);
    let vol = realized_volatility(traj);
    let biases: Vec<f64> = spec
        .heads()
        .iter()
        .map(|h| match h {
            HeadKind::AbsSquareInLoss if vol > 0.0 => vol,
            _ => 0.0,
        })
        .collect();
    set_output_biases(spec, &mut w, &biases);
    w
}

/// Initial weights for a regression fit: means, standard deviations and zero correlation.
pub fn regression_initial_weights(spec: &MlpSpec, data: &RegressionDataset, seed: u64) -> Weights {
    let mut w = mlp_init(spec, seed);
    let n = data.len().max(1) as f64;
    let mean = |i: usize| data.obs.iter().map(|o| o[i]).sum::<f64>() / n;
    let (m1, m2) = (mean(0), mean(1));
    let sd = |i: usize, m: f64| (data.obs.iter().map(|o| (o[i] - m).powi(2)).sum::<f64>() / n).sqrt();
    let (s1, s2) = (sd(0, m1), sd(1, m2));
    let fallback = |s: f64| if s > 0.0 { s } else { 1.0 };
    set_output_biases(spec, &mut w, &[m1, m2, fallback(s1), fallback(s2), 0.0]);
    w
}

/// Fit Θ(·, w) of an SDE to one observed path.
pub fn fit_sde<C: SdeCoefficients>(
    cfg: &TrainConfig,
    spec: &MlpSpec,
    coeffs: &C,
    traj: &Trajectory,
    init_seed: u64,
) -> Result<FitResult, TrainError> {
    fit_sde_with_observer(cfg, spec, coeffs, traj, init_seed, |_, _, _| Ok(()))
}

pub fn fit_sde_with_observer<C: SdeCoefficients, O>(
    cfg: &TrainConfig,
    spec: &MlpSpec,
    coeffs: &C,
    traj: &Trajectory,
    init_seed: u64,
    observer: O,
) -> Result<FitResult, TrainError>
where
    O: FnMut(usize, &Weights, f64) -> Result<(), String>,
{
    if spec.output_dim() != coeffs.theta_dim() {
        return Err(TrainError::Config(format!(
            "network has {} outputs but the model needs {}",
            spec.output_dim(),
            coeffs.theta_dim()
        )));
    }
    let init = sde_initial_weights(spec, traj, init_seed);
    let builder = loss_fn(|_tape, w, idx| sde_quasi_nll(coeffs, traj, idx, |k| theta_at(spec, w, traj.time(k))));
    fit_with_observer(cfg, init, traj.n_transitions(), builder, observer)
}

/// Fit Θ(·, w) = [μ₁, μ₂, σ₁, σ₂, ρ] to a bivariate dataset.
pub fn fit_regression(
    cfg: &TrainConfig,
    spec: &MlpSpec,
    data: &RegressionDataset,
    init_seed: u64,
) -> Result<FitResult, TrainError> {
    if spec.heads() != RegressionCaseSpec::heads().as_slice() {
        return Err(TrainError::Config(
            "regression needs heads identity,identity,abs_square,abs_square,tanh".into(),
        ));
    }
    let init = regression_initial_weights(spec, data, init_seed);
    let builder = loss_fn(|_tape, w, idx| regression_nll_2d(data, idx, |k| theta_at(spec, w, data.times[k])));
    fit(cfg, init, data.len(), builder)
}
