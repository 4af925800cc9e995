//! Residual-gradient training with double sampling.
//!
//! Each [`Objective`] describes one integral equation `u = Ψ(u)` through a
//! sample `(X0, forward draws, mirror draws)` whose two residuals are
//! conditionally independent given `X0`. Their product is an unbiased
//! estimate of the integrated squared residual, and
//! `2 · residual(forward) · ∇residual(mirror)` is an unbiased estimate of its
//! gradient. The four shipped objectives are:
//!
//! - [`FtaObjective`]: `u = g + Hu` on the continuation set, one step per side;
//! - [`PoissonObjective`]: `u − 2Pu + P²u = r − Pr`, two steps per side;
//! - [`DensityObjective`]: global balance for a pinned density, reference draws;
//! - [`SegmentObjective`]: the stopping-time identity with returns to a window.
//!
//! Random streams: sample `i` of a run uses `Streams::sample_streams(domain, i)`;
//! training sample `i = t · batch + b`, loss-log samples use a separate domain
//! and the same fixed evaluation set at every log point.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chains::{
    simulate_segment, ChainError, ChainModel, Kernel, PathSegment, Region, RegionSpec,
};
use crate::neural::{AdamConfig, Approximator, Mlp, NeuralError, Optimizer, OptimizerKind, PinnedNet};
use crate::rng::{domain, SampleStreams, Streams};

#[derive(Debug, Error)]
pub enum RgaError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("training diverged at iteration {iteration}: {what}")]
    Divergence { iteration: u64, what: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("chain `{0}` has no transition density")]
    MissingDensity(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Forward,
    Mirror,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Loss is logged at iteration 0, every `log_every` iterations, and at the end.
    pub log_every: u64,
    /// Size of the fixed evaluation set behind each logged loss.
    pub log_samples: usize,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    /// Use both terms of the product-rule gradient instead of twice the first.
    pub symmetric_gradient: bool,
    /// Fraction of the final iterations whose parameters are averaged into the
    /// returned network (Polyak–Ruppert); 0 returns the last iterate.
    pub tail_average: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            step_size: 1e-3,
            batch_size: 1,
            seed: 0,
            log_every: 10_000,
            log_samples: 1000,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            symmetric_gradient: false,
            tail_average: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RgaError> {
        let bad = |m: &str| Err(RgaError::InvalidConfig(m.to_string()));
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if self.log_samples < 2 {
            return bad("log_samples must be at least 2");
        }
        if !(0.0..1.0).contains(&self.tail_average) {
            return bad("tail_average must be in [0, 1)");
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("adam hyperparameters out of range");
        }
        Ok(())
    }
}

/// A double-sampled residual for one integral equation.
pub trait Objective: Sync {
    type Sample: Send;

    fn input_dim(&self) -> usize;

    fn draw(&self, streams: &mut SampleStreams) -> Result<Self::Sample, RgaError>;

    /// Residual built from `side`'s draws.
    fn residual<F: Approximator + ?Sized>(&self, f: &F, s: &Self::Sample, side: Side) -> f64;

    /// `out += scale · ∇_θ residual(side)`.
    fn add_residual_grad(&self, net: &Mlp, s: &Self::Sample, side: Side, scale: f64, out: &mut [f64]);

    /// Product of the two residuals: one unbiased draw of the loss.
    fn loss_sample<F: Approximator + ?Sized>(&self, f: &F, s: &Self::Sample) -> f64 {
        self.residual(f, s, Side::Forward) * self.residual(f, s, Side::Mirror)
    }
}

/// Adds `weight · ĝ` for one sample and returns the forward residual.
pub fn accumulate_gradient<O: Objective>(
    obj: &O,
    net: &Mlp,
    s: &O::Sample,
    symmetric: bool,
    weight: f64,
    out: &mut [f64],
) -> f64 {
    let fwd = obj.residual(net, s, Side::Forward);
    if symmetric {
        let mir = obj.residual(net, s, Side::Mirror);
        obj.add_residual_grad(net, s, Side::Mirror, weight * fwd, out);
        obj.add_residual_grad(net, s, Side::Forward, weight * mir, out);
    } else {
        obj.add_residual_grad(net, s, Side::Mirror, 2.0 * weight * fwd, out);
    }
    fwd
}

/// One unbiased gradient estimate `ĝ` for a single sample.
pub fn gradient_estimate<O: Objective>(obj: &O, net: &Mlp, s: &O::Sample, symmetric: bool) -> Vec<f64> {
    let mut g = vec![0.0; net.num_params()];
    accumulate_gradient(obj, net, s, symmetric, 1.0, &mut g);
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl LossEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / nf).sqrt(),
            n,
        }
    }
}

/// Draws samples `0..n` of `domain_base` under `seed`.
pub fn draw_samples<O: Objective>(
    obj: &O,
    seed: u64,
    domain_base: u64,
    n: usize,
) -> Result<Vec<O::Sample>, RgaError> {
    let streams = Streams::new(seed);
    (0..n as u64)
        .map(|i| obj.draw(&mut streams.sample_streams(domain_base, i)))
        .collect()
}

pub fn loss_on_samples<O: Objective, F: Approximator + ?Sized>(
    obj: &O,
    f: &F,
    samples: &[O::Sample],
) -> LossEstimate {
    let values: Vec<f64> = samples.iter().map(|s| obj.loss_sample(f, s)).collect();
    LossEstimate::from_values(&values)
}

/// Unbiased Monte Carlo estimate of the integrated squared residual of `f`.
pub fn residual_loss_estimate<O: Objective, F: Approximator + ?Sized>(
    obj: &O,
    f: &F,
    n: usize,
    seed: u64,
) -> Result<LossEstimate, RgaError> {
    if n < 2 {
        return Err(RgaError::InvalidConfig("loss estimate needs n >= 2".into()));
    }
    let samples = draw_samples(obj, seed, domain::PROBE, n)?;
    Ok(loss_on_samples(obj, f, &samples))
}

// ---------------------------------------------------------------------------
// First-transition equation.

/// `u = g + Hu` on `C = A^c`, with `X0 ~ ν` and one step per side.
#[derive(Debug, Clone)]
pub struct FtaObjective {
    pub chain: ChainModel,
    pub regions: RegionSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtaSample {
    pub anchor: Vec<f64>,
    pub forward: Vec<f64>,
    pub mirror: Vec<f64>,
}

impl FtaObjective {
    /// `Γ(X0, X1) = r(X0) + e^{-β(X0)} r(X1) 1{X1 ∈ A}`.
    pub fn gamma(&self, x0: &[f64], x1: &[f64]) -> f64 {
        let r0 = self.chain.reward(x0);
        if self.regions.in_target(x1) {
            r0 + self.chain.discount_factor(x0) * self.chain.reward(x1)
        } else {
            r0
        }
    }
}

impl Objective for FtaObjective {
    type Sample = FtaSample;

    fn input_dim(&self) -> usize {
        self.chain.dim()
    }

    fn draw(&self, st: &mut SampleStreams) -> Result<FtaSample, RgaError> {
        let anchor = self.regions.sample_nu(&mut st.anchor)?;
        let forward = self.chain.step(&anchor, &mut st.forward)?;
        let mirror = self.chain.step(&anchor, &mut st.mirror)?;
        Ok(FtaSample {
            anchor,
            forward,
            mirror,
        })
    }

    fn residual<F: Approximator + ?Sized>(&self, f: &F, s: &FtaSample, side: Side) -> f64 {
        let next = match side {
            Side::Forward => &s.forward,
            Side::Mirror => &s.mirror,
        };
        let cont = if self.regions.in_continuation(next) {
            self.chain.discount_factor(&s.anchor) * f.eval(next)
        } else {
            0.0
        };
        f.eval(&s.anchor) - self.gamma(&s.anchor, next) - cont
    }

    fn add_residual_grad(&self, net: &Mlp, s: &FtaSample, side: Side, scale: f64, out: &mut [f64]) {
        let next = match side {
            Side::Forward => &s.forward,
            Side::Mirror => &s.mirror,
        };
        net.add_scaled_grad(&s.anchor, scale, out);
        if self.regions.in_continuation(next) {
            net.add_scaled_grad(next, -scale * self.chain.discount_factor(&s.anchor), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Poisson's equation.

/// `u − 2Pu + P²u = r − Pr` with `X0 ~ ν` and a two-step path per side.
/// Solutions are defined up to an additive constant.
#[derive(Debug, Clone)]
pub struct PoissonObjective {
    pub chain: ChainModel,
    pub sampling: Region,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSample {
    pub anchor: Vec<f64>,
    pub forward: [Vec<f64>; 2],
    pub mirror: [Vec<f64>; 2],
}

impl PoissonObjective {
    fn path<'s>(s: &'s PoissonSample, side: Side) -> &'s [Vec<f64>; 2] {
        match side {
            Side::Forward => &s.forward,
            Side::Mirror => &s.mirror,
        }
    }
}

impl Objective for PoissonObjective {
    type Sample = PoissonSample;

    fn input_dim(&self) -> usize {
        self.chain.dim()
    }

    fn draw(&self, st: &mut SampleStreams) -> Result<PoissonSample, RgaError> {
        let anchor = self.sampling.sample_uniform(&mut st.anchor)?;
        let f1 = self.chain.step(&anchor, &mut st.forward)?;
        let f2 = self.chain.step(&f1, &mut st.forward)?;
        let m1 = self.chain.step(&anchor, &mut st.mirror)?;
        let m2 = self.chain.step(&m1, &mut st.mirror)?;
        Ok(PoissonSample {
            anchor,
            forward: [f1, f2],
            mirror: [m1, m2],
        })
    }

    fn residual<F: Approximator + ?Sized>(&self, f: &F, s: &PoissonSample, side: Side) -> f64 {
        let [x1, x2] = Self::path(s, side);
        f.eval(&s.anchor) - 2.0 * f.eval(x1) + f.eval(x2) - self.chain.reward(&s.anchor)
            + self.chain.reward(x1)
    }

    fn add_residual_grad(&self, net: &Mlp, s: &PoissonSample, side: Side, scale: f64, out: &mut [f64]) {
        let [x1, x2] = Self::path(s, side);
        net.add_scaled_grad(&s.anchor, scale, out);
        net.add_scaled_grad(x1, -2.0 * scale, out);
        net.add_scaled_grad(x2, scale, out);
    }
}

// ---------------------------------------------------------------------------
// Stationary density.

/// Global balance `π(y) = ∫ π(x) p(x, y) η(dx)` for the pinned function
/// `π̃(x) = f(x) − f(pin) + 1`, with `Y0 ~ ν` and `Z ~ η` on each side.
///
/// Residuals take the raw approximator `f`; pinning is applied here.
#[derive(Clone)]
pub struct DensityObjective {
    pub kernel: Arc<dyn Kernel>,
    pub sampling: Region,
    pub pin: Vec<f64>,
}

impl std::fmt::Debug for DensityObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityObjective")
            .field("kernel", &self.kernel.name())
            .field("sampling", &self.sampling)
            .field("pin", &self.pin)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensitySample {
    pub anchor: Vec<f64>,
    pub forward: Vec<f64>,
    pub mirror: Vec<f64>,
    /// `p(Z1, Y0)` and `p(Z−1, Y0)` with respect to `η`.
    pub forward_density: f64,
    pub mirror_density: f64,
}

impl DensityObjective {
    pub fn new(kernel: Arc<dyn Kernel>, sampling: Region) -> Result<Self, RgaError> {
        if kernel.density().is_none() {
            return Err(RgaError::MissingDensity(kernel.name()));
        }
        let pin = vec![0.0; kernel.dim()];
        Ok(Self {
            kernel,
            sampling,
            pin,
        })
    }

    fn side(s: &DensitySample, side: Side) -> (&[f64], f64) {
        match side {
            Side::Forward => (&s.forward, s.forward_density),
            Side::Mirror => (&s.mirror, s.mirror_density),
        }
    }
}

impl Objective for DensityObjective {
    type Sample = DensitySample;

    fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    fn draw(&self, st: &mut SampleStreams) -> Result<DensitySample, RgaError> {
        let density = self
            .kernel
            .density()
            .ok_or(RgaError::MissingDensity(self.kernel.name()))?;
        let anchor = self.sampling.sample_uniform(&mut st.anchor)?;
        let forward = density.sample_reference(&mut st.forward);
        let mirror = density.sample_reference(&mut st.mirror);
        Ok(DensitySample {
            forward_density: density.density_wrt_reference(&forward, &anchor),
            mirror_density: density.density_wrt_reference(&mirror, &anchor),
            anchor,
            forward,
            mirror,
        })
    }

    fn residual<F: Approximator + ?Sized>(&self, f: &F, s: &DensitySample, side: Side) -> f64 {
        let (z, p) = Self::side(s, side);
        let pin = f.eval(&self.pin);
        let at_anchor = f.eval(&s.anchor) - pin + 1.0;
        let at_z = f.eval(z) - pin + 1.0;
        at_anchor - at_z * p
    }

    fn add_residual_grad(&self, net: &Mlp, s: &DensitySample, side: Side, scale: f64, out: &mut [f64]) {
        // ∇π̃(Y0) − p ∇π̃(Z) with ∇π̃(x) = ∇f(x) − ∇f(pin).
        let (z, p) = Self::side(s, side);
        net.add_scaled_grad(&s.anchor, scale, out);
        net.add_scaled_grad(z, -scale * p, out);
        net.add_scaled_grad(&self.pin, -scale * (1.0 - p), out);
    }
}

// ---------------------------------------------------------------------------
// Stopping-time identity on a window.

/// `u(x) = E[V + W u(X_τ)]` with `τ` the first return to `K ∪ A`, `X0 ~ ν` on `K`.
#[derive(Debug, Clone)]
pub struct SegmentObjective {
    pub chain: ChainModel,
    pub regions: RegionSpec,
    pub step_cap: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSample {
    pub anchor: Vec<f64>,
    pub forward: PathSegment,
    pub mirror: PathSegment,
}

impl Objective for SegmentObjective {
    type Sample = SegmentSample;

    fn input_dim(&self) -> usize {
        self.chain.dim()
    }

    fn draw(&self, st: &mut SampleStreams) -> Result<SegmentSample, RgaError> {
        let anchor = self.regions.sample_nu(&mut st.anchor)?;
        let forward =
            simulate_segment(&self.chain, &self.regions, &anchor, &mut st.forward, self.step_cap)?;
        let mirror =
            simulate_segment(&self.chain, &self.regions, &anchor, &mut st.mirror, self.step_cap)?;
        Ok(SegmentSample {
            anchor,
            forward,
            mirror,
        })
    }

    fn residual<F: Approximator + ?Sized>(&self, f: &F, s: &SegmentSample, side: Side) -> f64 {
        let seg = match side {
            Side::Forward => &s.forward,
            Side::Mirror => &s.mirror,
        };
        let cont = if seg.weight != 0.0 {
            seg.weight * f.eval(&seg.terminal)
        } else {
            0.0
        };
        f.eval(&s.anchor) - seg.value - cont
    }

    fn add_residual_grad(&self, net: &Mlp, s: &SegmentSample, side: Side, scale: f64, out: &mut [f64]) {
        let seg = match side {
            Side::Forward => &s.forward,
            Side::Mirror => &s.mirror,
        };
        net.add_scaled_grad(&s.anchor, scale, out);
        if seg.weight != 0.0 {
            net.add_scaled_grad(&seg.terminal, -scale * seg.weight, out);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    pub log: Vec<LossRecord>,
}

/// SGD/Adam on an objective's double-sampled gradient, one step at a time.
pub struct Trainer<'a, O: Objective> {
    objective: &'a O,
    net: Mlp,
    optimizer: Optimizer,
    config: TrainConfig,
    streams: Streams,
    iteration: u64,
    grad: Vec<f64>,
    eval_set: Vec<O::Sample>,
    log: Vec<LossRecord>,
    average: Option<TailAverage>,
}

/// Running mean of the iterates after `start`.
struct TailAverage {
    start: u64,
    count: u64,
    mean: Mlp,
}

impl<'a, O: Objective> Trainer<'a, O> {
    pub fn new(objective: &'a O, net: Mlp, config: TrainConfig) -> Result<Self, RgaError> {
        config.validate()?;
        if net.input_dim() != objective.input_dim() {
            return Err(NeuralError::DimensionMismatch {
                expected: objective.input_dim(),
                got: net.input_dim(),
            }
            .into());
        }
        let optimizer = Optimizer::new(config.optimizer, net.num_params(), config.step_size, config.adam);
        let eval_set = draw_samples(objective, config.seed, domain::LOSS_LOG, config.log_samples)?;
        let grad = vec![0.0; net.num_params()];
        let average = (config.tail_average > 0.0).then(|| TailAverage {
            start: config.iterations - (config.iterations as f64 * config.tail_average) as u64,
            count: 0,
            mean: net.clone(),
        });
        Ok(Self {
            objective,
            net,
            optimizer,
            streams: Streams::new(config.seed),
            config,
            iteration: 0,
            grad,
            eval_set,
            log: Vec::new(),
            average,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// The current iterate.
    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// The network training would return now: the tail average once it has
    /// started, otherwise the current iterate.
    pub fn output(&self) -> &Mlp {
        match &self.average {
            Some(avg) if avg.count > 0 => &avg.mean,
            _ => &self.net,
        }
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    /// Loss estimate of [`Self::output`] on the fixed evaluation set.
    pub fn current_loss(&self) -> LossEstimate {
        loss_on_samples(self.objective, self.output(), &self.eval_set)
    }

    fn record(&mut self) -> Result<(), RgaError> {
        let est = self.current_loss();
        if !est.mean.is_finite() {
            return Err(RgaError::Divergence {
                iteration: self.iteration,
                what: "non-finite loss estimate".into(),
            });
        }
        self.log.push(LossRecord {
            iteration: self.iteration,
            mean: est.mean,
            stderr: est.stderr,
        });
        Ok(())
    }

    /// One parameter update from a fresh mini-batch.
    pub fn step(&mut self) -> Result<(), RgaError> {
        let batch = self.config.batch_size as u64;
        let weight = 1.0 / batch as f64;
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        for b in 0..batch {
            let index = self.iteration * batch + b;
            let mut st = self.streams.sample_streams(domain::TRAIN, index);
            let sample = self.objective.draw(&mut st)?;
            let res = accumulate_gradient(
                self.objective,
                &self.net,
                &sample,
                self.config.symmetric_gradient,
                weight,
                &mut self.grad,
            );
            if !res.is_finite() {
                return Err(RgaError::Divergence {
                    iteration: self.iteration,
                    what: "non-finite residual".into(),
                });
            }
        }
        self.optimizer
            .step(self.net.theta_mut(), &self.grad)
            .map_err(|e| RgaError::Divergence {
                iteration: self.iteration,
                what: e.to_string(),
            })?;
        if self.net.theta().iter().any(|v| !v.is_finite()) {
            return Err(RgaError::Divergence {
                iteration: self.iteration,
                what: "non-finite parameters".into(),
            });
        }
        self.iteration += 1;
        if let Some(avg) = self.average.as_mut().filter(|a| self.iteration > a.start) {
            avg.count += 1;
            let k = avg.count as f64;
            for (m, v) in avg.mean.theta_mut().iter_mut().zip(self.net.theta()) {
                *m += (v - *m) / k;
            }
        }
        Ok(())
    }

    /// Runs the configured number of iterations with periodic loss logging.
    pub fn run(mut self) -> Result<TrainOutcome, RgaError> {
        self.record()?;
        while self.iteration < self.config.iterations {
            self.step()?;
            if self.iteration % self.config.log_every == 0 || self.iteration == self.config.iterations {
                self.record()?;
            }
        }
        let net = self.output().clone();
        Ok(TrainOutcome { net, log: self.log })
    }
}

pub fn fta_rga(
    chain: ChainModel,
    regions: RegionSpec,
    net: Mlp,
    config: &TrainConfig,
) -> Result<TrainOutcome, RgaError> {
    let obj = FtaObjective { chain, regions };
    Trainer::new(&obj, net, config.clone())?.run()
}

pub fn poisson_rga(
    chain: ChainModel,
    sampling: Region,
    net: Mlp,
    config: &TrainConfig,
) -> Result<TrainOutcome, RgaError> {
    let obj = PoissonObjective { chain, sampling };
    Trainer::new(&obj, net, config.clone())?.run()
}

/// Returns the trained density pinned to 1 at the origin.
pub fn density_rga(
    kernel: Arc<dyn Kernel>,
    sampling: Region,
    net: Mlp,
    config: &TrainConfig,
) -> Result<(PinnedNet, Vec<LossRecord>), RgaError> {
    let obj = DensityObjective::new(kernel, sampling)?;
    let out = Trainer::new(&obj, net, config.clone())?.run()?;
    Ok((
        PinnedNet {
            net: out.net,
            pin: obj.pin.clone(),
        },
        out.log,
    ))
}

pub fn noncompact_fta_rga(
    chain: ChainModel,
    regions: RegionSpec,
    step_cap: u64,
    net: Mlp,
    config: &TrainConfig,
) -> Result<TrainOutcome, RgaError> {
    if regions.window.is_none() {
        return Err(RgaError::InvalidConfig("non-compact training needs a window K".into()));
    }
    let obj = SegmentObjective {
        chain,
        regions,
        step_cap,
    };
    Trainer::new(&obj, net, config.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::{BernoulliConvolution, FluidNetwork, GibbsSampler};
    use crate::neural::{Activation, ScaleRule};

    fn fluid_objective() -> FtaObjective {
        let a = Region::unit_box(2, 0.0, 1.0);
        FtaObjective {
            chain: ChainModel::hitting_time(Arc::new(FluidNetwork::default()), a.clone()),
            regions: RegionSpec {
                target: Some(a),
                window: None,
                sampling: Region::BoxMinusBox {
                    outer_lo: vec![0.0; 2],
                    outer_hi: vec![5.0; 2],
                    hole_lo: vec![0.0; 2],
                    hole_hi: vec![1.0; 2],
                },
            },
        }
    }

    fn bernoulli_poisson(square: bool) -> PoissonObjective {
        let reward: crate::chains::StateFn = if square {
            Arc::new(|x: &[f64]| x[0] * x[0])
        } else {
            Arc::new(|x: &[f64]| x[0])
        };
        PoissonObjective {
            chain: ChainModel::new(Arc::new(BernoulliConvolution), reward),
            sampling: Region::unit_box(1, 0.0, 1.0),
        }
    }

    #[test]
    fn zero_function_has_unit_negative_residual() {
        let obj = fluid_objective();
        let zero = |_: &[f64]| 0.0;
        let samples = draw_samples(&obj, 3, domain::TEST, 500).unwrap();
        for s in &samples {
            assert_eq!(obj.residual(&zero, s, Side::Forward), -1.0);
            assert_eq!(obj.residual(&zero, s, Side::Mirror), -1.0);
        }
        let est = residual_loss_estimate(&obj, &zero, 1000, 1).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn constants_solve_transformed_poisson_with_constant_reward() {
        let obj = PoissonObjective {
            chain: ChainModel::new(Arc::new(BernoulliConvolution), Arc::new(|_| 3.0)),
            sampling: Region::unit_box(1, 0.0, 1.0),
        };
        let c = |_: &[f64]| 7.5;
        for s in &draw_samples(&obj, 1, domain::TEST, 200).unwrap() {
            assert_eq!(obj.residual(&c, s, Side::Forward), 0.0);
        }
    }

    #[test]
    fn exact_poisson_residual_has_zero_mean_over_branches() {
        // Average the residual over the four equally likely (Z1, Z2) branches.
        let exact_lin = |x: f64| 2.0 * x;
        let exact_sq = |x: f64| 4.0 / 3.0 * x * x + 2.0 / 3.0 * x;
        for k in 0..=100 {
            let x0 = k as f64 / 100.0;
            for (u, r) in [
                (&exact_lin as &dyn Fn(f64) -> f64, (|x: f64| x) as fn(f64) -> f64),
                (&exact_sq, |x: f64| x * x),
            ] {
                let mut acc = 0.0;
                for z1 in [false, true] {
                    let x1 = BernoulliConvolution::apply(x0, z1);
                    for z2 in [false, true] {
                        let x2 = BernoulliConvolution::apply(x1, z2);
                        acc += u(x0) - 2.0 * u(x1) + u(x2) - r(x0) + r(x1);
                    }
                }
                assert!((acc / 4.0).abs() < 1e-14, "x0={x0}: {}", acc / 4.0);
            }
        }
    }

    #[test]
    fn swapping_sides_is_symmetric_in_expectation() {
        let obj = bernoulli_poisson(false);
        let f = |x: &[f64]| x[0].sin();
        let samples = draw_samples(&obj, 8, domain::TEST, 20_000).unwrap();
        let swapped: Vec<_> = samples
            .iter()
            .map(|s| PoissonSample {
                anchor: s.anchor.clone(),
                forward: s.mirror.clone(),
                mirror: s.forward.clone(),
            })
            .collect();
        let a = loss_on_samples(&obj, &f, &samples);
        let b = loss_on_samples(&obj, &f, &swapped);
        assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn segment_residual_in_target_drops_continuation() {
        let obj = SegmentObjective {
            chain: ChainModel::hitting_time(
                Arc::new(crate::chains::KieferWolfowitz::default()),
                Region::OrderedBand { lo: 0.0, hi: 3.0 },
            ),
            regions: RegionSpec {
                target: Some(Region::OrderedBand { lo: 0.0, hi: 3.0 }),
                window: Some(Region::OrderedBand { lo: 3.0, hi: 9.0 }),
                sampling: Region::OrderedBand { lo: 3.0, hi: 9.0 },
            },
            step_cap: 100_000,
        };
        let f = |x: &[f64]| x[0] + 2.0 * x[1];
        let mut checked = 0;
        for s in draw_samples(&obj, 2, domain::TEST, 2000).unwrap() {
            if s.forward.in_target {
                let r = obj.residual(&f, &s, Side::Forward);
                assert_eq!(r, f(&s.anchor) - s.forward.value);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn pinned_density_stays_one_at_origin() {
        let obj = DensityObjective::new(Arc::new(GibbsSampler), Region::unit_box(2, -1.0, 1.0)).unwrap();
        let net = Mlp::init(4, 2, &[16], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
        let cfg = TrainConfig {
            iterations: 300,
            log_every: 100,
            log_samples: 50,
            ..TrainConfig::default()
        };
        assert_eq!(PinnedNet::at_origin(net.clone()).eval(&[0.0, 0.0]), 1.0);
        let (pinned, _) = density_rga(obj.kernel.clone(), obj.sampling.clone(), net, &cfg).unwrap();
        assert_eq!(pinned.eval(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn density_requires_a_density() {
        assert!(matches!(
            DensityObjective::new(Arc::new(FluidNetwork::default()), Region::unit_box(2, 0.0, 5.0)),
            Err(RgaError::MissingDensity(_))
        ));
    }

    #[test]
    fn symmetric_and_one_sided_agree_in_mean() {
        let obj = bernoulli_poisson(true);
        let net = Mlp::init(6, 1, &[8], Activation::Sigmoid, None, ScaleRule::Uniform(2.0)).unwrap();
        let samples = draw_samples(&obj, 6, domain::TEST, 40_000).unwrap();
        let mut a = vec![0.0; net.num_params()];
        let mut b = vec![0.0; net.num_params()];
        for s in &samples {
            accumulate_gradient(&obj, &net, s, false, 1.0, &mut a);
            accumulate_gradient(&obj, &net, s, true, 1.0, &mut b);
        }
        let n = samples.len() as f64;
        let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max) / n;
        for (x, y) in a.iter().zip(&b) {
            assert!(((x - y) / n).abs() < 0.05 * scale + 1e-3);
        }
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let obj = bernoulli_poisson(false);
        let net = Mlp::init(1, 1, &[10], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            log_samples: 10,
            ..TrainConfig::default()
        };
        let out = Trainer::new(&obj, net.clone(), cfg).unwrap().run().unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let obj = bernoulli_poisson(false);
        let net = Mlp::init(1, 1, &[4], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
        for cfg in [
            TrainConfig { step_size: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { log_samples: 1, ..TrainConfig::default() },
        ] {
            assert!(matches!(Trainer::new(&obj, net.clone(), cfg), Err(RgaError::InvalidConfig(_))));
        }
        let wrong_dim = Mlp::init(1, 2, &[4], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
        assert!(Trainer::new(&obj, wrong_dim, TrainConfig::default()).is_err());
    }

    #[test]
    fn huge_step_size_reports_divergence() {
        let obj = fluid_objective();
        let net = Mlp::init(1, 2, &[4], Activation::Sigmoid, None, ScaleRule::Uniform(1.0)).unwrap();
        let cfg = TrainConfig {
            iterations: 10_000,
            step_size: 1e200,
            optimizer: OptimizerKind::Sgd,
            log_samples: 10,
            ..TrainConfig::default()
        };
        let err = Trainer::new(&obj, net, cfg).unwrap().run().unwrap_err();
        assert!(matches!(err, RgaError::Divergence { .. }), "{err}");
    }

    #[test]
    fn training_is_reproducible() {
        let obj = bernoulli_poisson(false);
        let net = Mlp::init(2, 1, &[12], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            step_size: 1e-2,
            batch_size: 3,
            optimizer: OptimizerKind::Sgd,
            log_every: 100,
            log_samples: 50,
            ..TrainConfig::default()
        };
        let a = Trainer::new(&obj, net.clone(), cfg.clone()).unwrap().run().unwrap();
        let b = Trainer::new(&obj, net, cfg).unwrap().run().unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 100, 200, 300, 400, 500]);
    }

    #[test]
    fn tail_average_is_mean_of_final_iterates() {
        let obj = bernoulli_poisson(true);
        let net = Mlp::init(4, 1, &[6], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
        let cfg = TrainConfig {
            iterations: 40,
            step_size: 1e-2,
            optimizer: OptimizerKind::Sgd,
            log_every: 10,
            log_samples: 10,
            tail_average: 0.25,
            ..TrainConfig::default()
        };
        let mut manual = Trainer::new(&obj, net.clone(), cfg.clone()).unwrap();
        let mut sum = vec![0.0; net.num_params()];
        for t in 1..=40 {
            manual.step().unwrap();
            if t > 30 {
                sum.iter_mut().zip(manual.net().theta()).for_each(|(s, v)| *s += v);
            }
        }
        let out = Trainer::new(&obj, net, cfg).unwrap().run().unwrap();
        for (a, s) in out.net.theta().iter().zip(&sum) {
            assert!((a - s / 10.0).abs() < 1e-12);
        }
        assert_ne!(out.net.theta(), manual.net().theta());
        assert!(TrainConfig { tail_average: 1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
