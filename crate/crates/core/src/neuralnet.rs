//! Feed-forward network Θ(t, w) mapping a time value to parameter components.
//!
//! Hidden layers use ReLU, the output layer is linear, and each output passes
//! through a [`HeadKind`] that enforces the admissible range of the parameter
//! it represents.
//!
//! Weights are stored flat: for every layer the `out × in` weight matrix in
//! row-major order, followed by the `out` biases.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::Real;
use crate::simulate::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("weights file header: {0}")]
    Header(String),
    #[error("weights file body: {0}")]
    Body(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Means and drift parameters.
    Identity,
    /// Diffusion magnitude: the loss only sees the square, reports use `|x|`.
    AbsSquareInLoss,
    /// Correlation, mapped into (−1, 1) through `tanh`.
    TanhCorrelation,
}

/// Bound on |ρ|; plain `tanh` rounds to exactly ±1 beyond |x| ≈ 19.
pub const CORRELATION_LIMIT: f64 = 1.0 - 1e-12;

impl HeadKind {
    /// Transformation used inside losses.
    pub fn apply<S: Real>(self, raw: S) -> S {
        match self {
            HeadKind::Identity | HeadKind::AbsSquareInLoss => raw,
            HeadKind::TanhCorrelation => raw.tanh() * CORRELATION_LIMIT,
        }
    }

    /// Transformation used when reporting or simulating with a fitted network.
    pub fn report(self, raw: f64) -> f64 {
        match self {
            HeadKind::Identity => raw,
            HeadKind::AbsSquareInLoss => raw.abs(),
            HeadKind::TanhCorrelation => raw.tanh() * CORRELATION_LIMIT,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            HeadKind::Identity => "identity",
            HeadKind::AbsSquareInLoss => "abs_square",
            HeadKind::TanhCorrelation => "tanh",
        }
    }
}

impl FromStr for HeadKind {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "identity" => Ok(HeadKind::Identity),
            "abs_square" => Ok(HeadKind::AbsSquareInLoss),
            "tanh" => Ok(HeadKind::TanhCorrelation),
            other => Err(NetError::Header(format!("unknown head kind '{other}'"))),
        }
    }
}

pub fn apply_heads<S: Real>(raw: &[S], heads: &[HeadKind]) -> Vec<S> {
    assert_eq!(raw.len(), heads.len(), "apply_heads: length mismatch");
    raw.iter().zip(heads).map(|(&r, h)| h.apply(r)).collect()
}

/// Architecture of Θ(·, w).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    heads: Vec<HeadKind>,
    /// The network sees `input_scale · t`.
    input_scale: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, heads: Vec<HeadKind>) -> Result<Self, NetError> {
        if widths.len() < 2 {
            return Err(NetError::Architecture(
                "need at least an input and an output layer".into(),
            ));
        }
        if widths[0] != 1 {
            return Err(NetError::Architecture(format!(
                "input width must be 1 (time), got {}",
                widths[0]
            )));
        }
        if widths.contains(&0) {
            return Err(NetError::Architecture("layer widths must be positive".into()));
        }
        if heads.len() != *widths.last().unwrap() {
            return Err(NetError::Architecture(format!(
                "{} heads for {} outputs",
                heads.len(),
                widths.last().unwrap()
            )));
        }
        Ok(MlpSpec {
            widths,
            heads,
            input_scale: 1.0,
        })
    }

    /// Four dense layers `[1, hidden, hidden, hidden, s]`.
    pub fn four_layer(hidden: usize, heads: Vec<HeadKind>) -> Result<Self, NetError> {
        let s = heads.len();
        Self::new(vec![1, hidden, hidden, hidden, s], heads)
    }

    pub fn with_input_scale(mut self, scale: f64) -> Result<Self, NetError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(NetError::Architecture(format!(
                "input scale must be positive and finite, got {scale}"
            )));
        }
        self.input_scale = scale;
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn heads(&self) -> &[HeadKind] {
        &self.heads
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wo = offset;
            let bo = wo + fan_in * fan_out;
            offset = bo + fan_out;
            (wo, bo, fan_in, fan_out)
        })
    }

    /// Index of the output-layer bias feeding head `head`.
    pub fn output_bias_index(&self, head: usize) -> usize {
        let (_, bo, _, _) = self.layers().last().unwrap();
        bo + head
    }
}

/// Flat parameter vector of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(pub Vec<f64>);

impl Weights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Glorot-uniform weights, zero biases.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Weights {
    let mut rng = Rng::new(seed, 0x6d6c_705f_696e_6974);
    let mut w = vec![0.0; spec.param_count()];
    for (wo, _, fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut w[wo..wo + fan_in * fan_out] {
            *v = rng.uniform_range(-limit, limit);
        }
    }
    Weights(w)
}

/// Raw network outputs (before heads) at time `t`.
pub fn mlp_forward<S: Real>(spec: &MlpSpec, weights: &[S], t: f64) -> Vec<S> {
    assert_eq!(weights.len(), spec.param_count(), "mlp_forward: weight count");
    let n_layers = spec.widths.len() - 1;
    let input = [t * spec.input_scale];
    let mut act: Vec<S> = Vec::new();
    for (li, (wo, bo, fan_in, fan_out)) in spec.layers().enumerate() {
        let mut next = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let row = &weights[wo + j * fan_in..wo + (j + 1) * fan_in];
            let bias = weights[bo + j];
            let pre = if li == 0 {
                S::affine_const(bias, row, &input)
            } else {
                S::affine(bias, row, &act)
            };
            next.push(if li + 1 < n_layers { pre.relu() } else { pre });
        }
        act = next;
    }
    act
}

/// Θ(t) as used inside losses.
pub fn theta_at<S: Real>(spec: &MlpSpec, weights: &[S], t: f64) -> Vec<S> {
    apply_heads(&mlp_forward(spec, weights, t), &spec.heads)
}

/// Θ(t) as reported (absolute value on diffusion heads).
pub fn theta_report(spec: &MlpSpec, weights: &Weights, t: f64) -> Vec<f64> {
    mlp_forward(spec, &weights.0, t)
        .into_iter()
        .zip(&spec.heads)
        .map(|(r, h)| h.report(r))
        .collect()
}

/// Optional key/value lines stored alongside weights (used by checkpoints).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightsMeta {
    pub epoch: Option<usize>,
    pub loss: Option<f64>,
}

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Text form: `format=1`, `layers=…`, `heads=…`, `input_scale=…`, optional
/// `epoch=`/`loss=` lines, then one value per line.
pub fn write_weights(spec: &MlpSpec, weights: &Weights, meta: &WeightsMeta) -> String {
    let mut out = String::new();
    let layers: Vec<String> = spec.widths.iter().map(|w| w.to_string()).collect();
    let heads: Vec<&str> = spec.heads.iter().map(|h| h.tag()).collect();
    writeln!(out, "format=1").unwrap();
    writeln!(out, "layers={}", layers.join(",")).unwrap();
    writeln!(out, "heads={}", heads.join(",")).unwrap();
    writeln!(out, "input_scale={}", format_real(spec.input_scale)).unwrap();
    if let Some(e) = meta.epoch {
        writeln!(out, "epoch={e}").unwrap();
    }
    if let Some(l) = meta.loss {
        writeln!(out, "loss={}", format_real(l)).unwrap();
    }
    for v in &weights.0 {
        writeln!(out, "{}", format_real(*v)).unwrap();
    }
    out
}

pub fn parse_weights(text: &str) -> Result<(MlpSpec, Weights, WeightsMeta), NetError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
    match lines.next() {
        Some("format=1") => {}
        Some(other) => {
            return Err(NetError::Header(format!(
                "expected 'format=1' on the first line, found '{other}'"
            )))
        }
        None => return Err(NetError::Header("empty file".into())),
    }
    let mut widths = None;
    let mut heads = None;
    let mut scale = 1.0;
    let mut meta = WeightsMeta::default();
    while let Some(line) = lines.peek() {
        let Some((key, value)) = line.split_once('=') else {
            break;
        };
        match key {
            "layers" => {
                let w: Result<Vec<usize>, _> = value.split(',').map(|v| v.trim().parse()).collect();
                widths = Some(w.map_err(|e| NetError::Header(format!("layers: {e}")))?);
            }
            "heads" => {
                let h: Result<Vec<HeadKind>, _> = value.split(',').map(str::parse).collect();
                heads = Some(h?);
            }
            "input_scale" => {
                scale = value
                    .parse()
                    .map_err(|e| NetError::Header(format!("input_scale: {e}")))?;
            }
            "epoch" => {
                meta.epoch = Some(value.parse().map_err(|e| NetError::Header(format!("epoch: {e}")))?);
            }
            "loss" => {
                meta.loss = Some(value.parse().map_err(|e| NetError::Header(format!("loss: {e}")))?);
            }
            other => return Err(NetError::Header(format!("unknown key '{other}'"))),
        }
        lines.next();
    }
    let widths = widths.ok_or_else(|| NetError::Header("missing 'layers=' line".into()))?;
    let heads = heads.ok_or_else(|| NetError::Header("missing 'heads=' line".into()))?;
    let spec = MlpSpec::new(widths, heads)
        .and_then(|s| s.with_input_scale(scale))
        .map_err(|e| NetError::Header(e.to_string()))?;
    let values: Result<Vec<f64>, _> = lines
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|e| NetError::Body(format!("value {i}: '{l}': {e}")))
        })
        .collect();
    let values = values?;
    if values.len() != spec.param_count() {
        return Err(NetError::Body(format!(
            "expected {} values for layers {:?}, found {}",
            spec.param_count(),
            spec.widths,
            values.len()
        )));
    }
    Ok((spec, Weights(values), meta))
}
