//! Feed-forward approximator `u_θ(x) = Σ_j a_j σ(w_j·x + b_j)` with exact
//! parameter gradients, plus the optimizers that update it.
//!
//! Parameters live in one flat vector so optimizers and gradient estimators
//! work on `&[f64]` directly. The layout is fixed:
//!
//! 1. output weights `a` (length = last hidden width),
//! 2. for each hidden layer, first to last: its weight matrix row-major
//!    (`width × fan_in`) followed by its biases.
//!
//! With a single hidden layer this is exactly `a`, then `w` row-major, then `b`.
//!
//! Subgradient conventions: ReLU uses `σ'(0) = 0`; when an output clip `B` is
//! set and the raw output lies strictly outside `[-B, B]` the gradient is zero.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const MAX_DEPTH: usize = 3;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input has dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at optimizer step {step}: non-finite gradient")]
    Divergence { step: u64 },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Value and derivative at `z`.
    #[inline]
    pub fn apply_with_slope(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weight initialization rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleRule {
    /// Hidden weights and biases uniform on `(-1/√fan_in, 1/√fan_in)`,
    /// output weights uniform on `(-1/√m, 1/√m)`.
    FanIn,
    /// Every parameter uniform on `(-s, s)`.
    Uniform(f64),
}

/// Anything that can be evaluated at a state. Residual estimators accept
/// this so closed-form solutions can be plugged in where a network would go.
pub trait Approximator {
    fn eval(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> Approximator for F {
    fn eval(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Network parameters θ together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    widths: Vec<usize>,
    activation: Activation,
    clip: Option<f64>,
    theta: Vec<f64>,
}

fn param_count(input_dim: usize, widths: &[usize]) -> usize {
    let mut n = *widths.last().unwrap_or(&0);
    let mut fan_in = input_dim;
    for &w in widths {
        n += w * fan_in + w;
        fan_in = w;
    }
    n
}

impl Mlp {
    /// Builds a network from an explicit flat parameter vector.
    pub fn from_parts(
        input_dim: usize,
        widths: Vec<usize>,
        activation: Activation,
        clip: Option<f64>,
        theta: Vec<f64>,
    ) -> Result<Self, NeuralError> {
        if input_dim == 0 {
            return Err(NeuralError::InvalidShape("input_dim must be positive".into()));
        }
        if widths.is_empty() || widths.len() > MAX_DEPTH {
            return Err(NeuralError::InvalidShape(format!(
                "depth must be in 1..={MAX_DEPTH}, got {}",
                widths.len()
            )));
        }
        if widths.contains(&0) {
            return Err(NeuralError::InvalidShape("hidden widths must be positive".into()));
        }
        if let Some(b) = clip {
            if !(b.is_finite() && b > 0.0) {
                return Err(NeuralError::InvalidShape("clip must be a positive real".into()));
            }
        }
        let expected = param_count(input_dim, &widths);
        if theta.len() != expected {
            return Err(NeuralError::InvalidShape(format!(
                "expected {expected} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("parameters"));
        }
        Ok(Self {
            input_dim,
            widths,
            activation,
            clip,
            theta,
        })
    }

    /// Single hidden layer network from `a`, `w` (one row per hidden unit) and `b`.
    pub fn single_layer(
        a: &[f64],
        w: &[Vec<f64>],
        b: &[f64],
        activation: Activation,
        clip: Option<f64>,
    ) -> Result<Self, NeuralError> {
        let m = a.len();
        if w.len() != m || b.len() != m || m == 0 {
            return Err(NeuralError::InvalidShape("a, w, b must share length m > 0".into()));
        }
        let d = w[0].len();
        if w.iter().any(|row| row.len() != d) {
            return Err(NeuralError::InvalidShape("ragged input weights".into()));
        }
        let mut theta = Vec::with_capacity(m * (d + 2));
        theta.extend_from_slice(a);
        for row in w {
            theta.extend_from_slice(row);
        }
        theta.extend_from_slice(b);
        Self::from_parts(d, vec![m], activation, clip, theta)
    }

    /// Seeded initialization; identical arguments give bitwise-identical networks.
    pub fn init(
        seed: u64,
        input_dim: usize,
        widths: &[usize],
        activation: Activation,
        clip: Option<f64>,
        rule: ScaleRule,
    ) -> Result<Self, NeuralError> {
        let total = param_count(input_dim, widths);
        let mut rng = rng::Streams::new(seed).rng(rng::domain::INIT, 0);
        let mut theta = vec![0.0; total];
        let m = *widths.last().unwrap_or(&1);
        let out_scale = match rule {
            ScaleRule::FanIn => 1.0 / (m as f64).sqrt(),
            ScaleRule::Uniform(s) => s,
        };
        for v in &mut theta[..m.min(total)] {
            *v = rng::uniform(&mut rng, -out_scale, out_scale);
        }
        let mut offset = m;
        let mut fan_in = input_dim;
        for &w in widths {
            let scale = match rule {
                ScaleRule::FanIn => 1.0 / (fan_in as f64).sqrt(),
                ScaleRule::Uniform(s) => s,
            };
            let n = w * fan_in + w;
            if offset + n > total {
                break;
            }
            for v in &mut theta[offset..offset + n] {
                *v = rng::uniform(&mut rng, -scale, scale);
            }
            offset += n;
            fan_in = w;
        }
        Self::from_parts(input_dim, widths.to_vec(), activation, clip, theta)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn clip(&self) -> Option<f64> {
        self.clip
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.theta[..*self.widths.last().unwrap()]
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NeuralError> {
        if x.len() != self.input_dim {
            return Err(NeuralError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("input"));
        }
        Ok(())
    }

    /// `u_θ(x)`, clipped to `[-B, B]` when a clip is configured.
    pub fn forward(&self, x: &[f64]) -> Result<f64, NeuralError> {
        self.check_input(x)?;
        Ok(self.value(x))
    }

    /// Gradient of `forward(·, x)` with respect to θ in the flat layout.
    pub fn grad_params(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(x)?;
        let mut g = vec![0.0; self.theta.len()];
        self.add_scaled_grad(x, 1.0, &mut g);
        Ok(g)
    }

    /// Unchecked forward pass; `x.len()` must equal `input_dim`.
    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        let raw = self.raw_value(x);
        match self.clip {
            Some(b) => raw.clamp(-b, b),
            None => raw,
        }
    }

    fn raw_value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim);
        if self.widths.len() == 1 {
            let m = self.widths[0];
            let d = self.input_dim;
            let (a, rest) = self.theta.split_at(m);
            let (w, b) = rest.split_at(m * d);
            let mut out = 0.0;
            for j in 0..m {
                let row = &w[j * d..(j + 1) * d];
                let z = row.iter().zip(x).fold(b[j], |acc, (wi, xi)| acc + wi * xi);
                out += a[j] * self.activation.apply(z);
            }
            out
        } else {
            let acts = self.hidden_pass(x);
            let last = &acts.last().unwrap().0;
            self.output_weights().iter().zip(last).map(|(a, h)| a * h).sum()
        }
    }

    /// Per-layer (activations, slopes) for the multi-layer path.
    fn hidden_pass(&self, x: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.widths.len());
        let mut offset = *self.widths.last().unwrap();
        let mut input: Vec<f64> = x.to_vec();
        for &w in &self.widths {
            let fan_in = input.len();
            let weights = &self.theta[offset..offset + w * fan_in];
            let biases = &self.theta[offset + w * fan_in..offset + w * fan_in + w];
            let mut h = Vec::with_capacity(w);
            let mut s = Vec::with_capacity(w);
            for j in 0..w {
                let row = &weights[j * fan_in..(j + 1) * fan_in];
                let z = row.iter().zip(&input).fold(biases[j], |acc, (wi, xi)| acc + wi * xi);
                let (hv, sv) = self.activation.apply_with_slope(z);
                h.push(hv);
                s.push(sv);
            }
            offset += w * fan_in + w;
            input = h.clone();
            out.push((h, s));
        }
        out
    }

    /// `out += scale · ∇_θ u_θ(x)` (unchecked input).
    pub fn add_scaled_grad(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.theta.len());
        if scale == 0.0 {
            return;
        }
        if let Some(b) = self.clip {
            let raw = self.raw_value(x);
            if raw > b || raw < -b {
                return;
            }
        }
        if self.widths.len() == 1 {
            let m = self.widths[0];
            let d = self.input_dim;
            let (a, rest) = self.theta.split_at(m);
            let (w, b) = rest.split_at(m * d);
            let (ga, grest) = out.split_at_mut(m);
            let (gw, gb) = grest.split_at_mut(m * d);
            for j in 0..m {
                let row = &w[j * d..(j + 1) * d];
                let z = row.iter().zip(x).fold(b[j], |acc, (wi, xi)| acc + wi * xi);
                let (h, slope) = self.activation.apply_with_slope(z);
                ga[j] += scale * h;
                let coef = scale * a[j] * slope;
                if coef != 0.0 {
                    for (g, xi) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += coef * xi;
                    }
                    gb[j] += coef;
                }
            }
            return;
        }

        let acts = self.hidden_pass(x);
        let depth = self.widths.len();
        let m = self.widths[depth - 1];
        for j in 0..m {
            out[j] += scale * acts[depth - 1].0[j];
        }
        // Offsets of each hidden layer's block in θ.
        let mut offsets = Vec::with_capacity(depth);
        let mut off = m;
        let mut fan_in = self.input_dim;
        for &w in &self.widths {
            offsets.push((off, fan_in));
            off += w * fan_in + w;
            fan_in = w;
        }
        // delta = ∂u/∂z for the current layer.
        let mut delta: Vec<f64> = (0..m)
            .map(|j| scale * self.theta[j] * acts[depth - 1].1[j])
            .collect();
        for layer in (0..depth).rev() {
            let w = self.widths[layer];
            let (off, fan_in) = offsets[layer];
            let input: &[f64] = if layer == 0 { x } else { &acts[layer - 1].0 };
            for j in 0..w {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for i in 0..fan_in {
                    out[off + j * fan_in + i] += dj * input[i];
                }
                out[off + w * fan_in + j] += dj;
            }
            if layer > 0 {
                let weights = &self.theta[off..off + w * fan_in];
                let slopes = &acts[layer - 1].1;
                let mut next = vec![0.0; fan_in];
                for j in 0..w {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    for i in 0..fan_in {
                        next[i] += dj * weights[j * fan_in + i];
                    }
                }
                for (n, s) in next.iter_mut().zip(slopes) {
                    *n *= s;
                }
                delta = next;
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim,
            widths: self.widths.clone(),
            activation: self.activation,
            clip: self.clip,
            theta: self.theta.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, NeuralError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NeuralError::InvalidShape(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Self::from_parts(ck.input_dim, ck.widths, ck.activation, ck.clip, ck.theta)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let text = fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

impl Approximator for Mlp {
    fn eval(&self, x: &[f64]) -> f64 {
        self.value(x)
    }
}

pub const CHECKPOINT_FORMAT: &str = "ftarga-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter record. JSON numbers round-trip `f64` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub clip: Option<f64>,
    pub theta: Vec<f64>,
}

/// `x ↦ f(x) − f(pin) + 1`: equals exactly 1 at the pin for every θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnedNet {
    pub net: Mlp,
    pub pin: Vec<f64>,
}

impl PinnedNet {
    /// Pins at the origin.
    pub fn at_origin(net: Mlp) -> Self {
        let pin = vec![0.0; net.input_dim()];
        Self { net, pin }
    }

    /// Evaluates using a precomputed `f(pin)`.
    #[inline]
    pub fn value_with_pin(&self, x: &[f64], pin_value: f64) -> f64 {
        self.net.value(x) - pin_value + 1.0
    }

    pub fn pin_value(&self) -> f64 {
        self.net.value(&self.pin)
    }

    /// `out += scale · ∇_θ [f(x) − f(pin)]`.
    pub fn add_scaled_grad(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        self.net.add_scaled_grad(x, scale, out);
        self.net.add_scaled_grad(&self.pin, -scale, out);
    }
}

impl Approximator for PinnedNet {
    fn eval(&self, x: &[f64]) -> f64 {
        self.net.value(x) - self.net.value(&self.pin) + 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub lr: f64,
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            t: 0,
            lr,
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NeuralError> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NeuralError::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len().min(params.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NeuralError::Divergence { step: self.t + 1 });
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain SGD or Adam over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, t: u64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize, lr: f64, adam: AdamConfig) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr, t: 0 },
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(n, lr, adam)),
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Optimizer::Sgd { t, .. } => *t,
            Optimizer::Adam(s) => s.t,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NeuralError> {
        match self {
            Optimizer::Sgd { lr, t } => {
                if grad.len() != params.len() {
                    return Err(NeuralError::DimensionMismatch {
                        expected: params.len(),
                        got: grad.len(),
                    });
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(NeuralError::Divergence { step: *t + 1 });
                }
                *t += 1;
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
                Ok(())
            }
            Optimizer::Adam(state) => state.step(params, grad),
        }
    }
}
