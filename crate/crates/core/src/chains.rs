//! Markov-chain models, regions, and path sampling.
//!
//! A [`Kernel`] is the one-step transition law `P(x, ·)`. A [`ChainModel`]
//! adds the reward `r` and discount rate `β` of the first-transition functional
//! `u*(x) = E_x Σ_{k ≤ T} exp(-Σ_{j<k} β(X_j)) r(X_k)`, where `T` is the first
//! entrance time to the target set. [`RegionSpec`] names the target `A`, the
//! training window `K` and the sampling measure `ν`.
//!
//! Draw order per kernel step is fixed so seeded runs are bit-reproducible:
//!
//! - fluid network: interarrival `T`, then `Z1`, then `Z2`;
//! - G/G/2: interarrival `A`, then service `S`;
//! - Bernoulli convolution: one bit;
//! - Gibbs sampler: rejection loop for `y1`, then rejection loop for `y2`,
//!   each trial drawing the proposal before the acceptance uniform.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{uniform, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("rejection sampler gave up after {attempts} attempts")]
    SamplerExhausted { attempts: u64 },
    #[error("path did not return to the window or target within {steps} steps")]
    NonReturn { steps: u64 },
    #[error("state {0:?} is outside the state space")]
    OutsideStateSpace(Vec<f64>),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
}

/// A closed subset of the state space with a uniform sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    /// Closed box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `outer` with the closed box `hole` removed.
    BoxMinusBox {
        outer_lo: Vec<f64>,
        outer_hi: Vec<f64>,
        hole_lo: Vec<f64>,
        hole_hi: Vec<f64>,
    },
    /// Ordered pairs `lo ≤ x1 ≤ x2 ≤ hi`.
    OrderedBand { lo: f64, hi: f64 },
}

const REJECTION_CAP: u64 = 1_000_000;

fn in_box(x: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    x.len() == lo.len() && x.iter().zip(lo).zip(hi).all(|((v, l), h)| *l <= *v && *v <= *h)
}

impl Region {
    pub fn unit_box(dim: usize, lo: f64, hi: f64) -> Self {
        Region::Box {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Box { lo, .. } => lo.len(),
            Region::BoxMinusBox { outer_lo, .. } => outer_lo.len(),
            Region::OrderedBand { .. } => 2,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { lo, hi } => in_box(x, lo, hi),
            Region::BoxMinusBox {
                outer_lo,
                outer_hi,
                hole_lo,
                hole_hi,
            } => in_box(x, outer_lo, outer_hi) && !in_box(x, hole_lo, hole_hi),
            Region::OrderedBand { lo, hi } => {
                x.len() == 2 && *lo <= x[0] && x[0] <= x[1] && x[1] <= *hi
            }
        }
    }

    /// Box the region is sampled from by rejection.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Box { lo, hi } => (lo.clone(), hi.clone()),
            Region::BoxMinusBox {
                outer_lo, outer_hi, ..
            } => (outer_lo.clone(), outer_hi.clone()),
            Region::OrderedBand { lo, hi } => (vec![*lo; 2], vec![*hi; 2]),
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let (lo, hi) = self.bounding_box();
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(ChainError::InvalidRegion("bounds have mismatched dimension".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(ChainError::InvalidRegion("bounds must be finite with lo < hi".into()));
        }
        if let Region::BoxMinusBox { hole_lo, hole_hi, .. } = self {
            if hole_lo.len() != lo.len() || hole_hi.len() != lo.len() {
                return Err(ChainError::InvalidRegion("hole has mismatched dimension".into()));
            }
        }
        Ok(())
    }

    /// Uniform draw over the region (rejection from the bounding box).
    pub fn sample_uniform(&self, rng: &mut SimRng) -> Result<Vec<f64>, ChainError> {
        let (lo, hi) = self.bounding_box();
        let mut x = vec![0.0; lo.len()];
        for _ in 0..REJECTION_CAP {
            for ((v, l), h) in x.iter_mut().zip(&lo).zip(&hi) {
                *v = uniform(rng, *l, *h);
            }
            if self.contains(&x) {
                return Ok(x);
            }
        }
        Err(ChainError::SamplerExhausted {
            attempts: REJECTION_CAP,
        })
    }
}

/// Target `A`, optional window `K`, and sampling measure `ν` (uniform over
/// `sampling`). The continuation set is everything outside `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub target: Option<Region>,
    pub window: Option<Region>,
    pub sampling: Region,
}

impl RegionSpec {
    pub fn in_target(&self, x: &[f64]) -> bool {
        self.target.as_ref().is_some_and(|a| a.contains(x))
    }

    pub fn in_continuation(&self, x: &[f64]) -> bool {
        !self.in_target(x)
    }

    /// `K` minus `A`; with no window every continuation state counts.
    pub fn in_window(&self, x: &[f64]) -> bool {
        !self.in_target(x) && self.window.as_ref().is_none_or(|k| k.contains(x))
    }

    pub fn sample_nu(&self, rng: &mut SimRng) -> Result<Vec<f64>, ChainError> {
        self.sampling.sample_uniform(rng)
    }

    /// Checks region shapes and that `ν` draws land in `K \ A`.
    pub fn validate(&self, rng: &mut SimRng) -> Result<(), ChainError> {
        self.sampling.validate()?;
        if let Some(a) = &self.target {
            a.validate()?;
        }
        if let Some(k) = &self.window {
            k.validate()?;
        }
        for _ in 0..256 {
            let x = self.sample_nu(rng)?;
            if !self.sampling.contains(&x) || !self.in_window(&x) {
                return Err(ChainError::InvalidRegion(format!(
                    "sampling measure produced {x:?} outside the window"
                )));
            }
        }
        Ok(())
    }
}

/// One-step transition law.
pub trait Kernel: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn in_state_space(&self, x: &[f64]) -> bool;
    fn step(&self, x: &[f64], rng: &mut SimRng) -> Result<Vec<f64>, ChainError>;
    /// Transition density, when the kernel has one.
    fn density(&self) -> Option<&dyn TransitionDensity> {
        None
    }
}

/// `P(x, dy) = p(x, y) η(dy)` for a probability measure `η`.
pub trait TransitionDensity: Send + Sync {
    /// `p(x, y)` with respect to `η`.
    fn density_wrt_reference(&self, x: &[f64], y: &[f64]) -> f64;
    fn sample_reference(&self, rng: &mut SimRng) -> Vec<f64>;
}

pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A kernel together with reward `r` and discount rate `β`.
#[derive(Clone)]
pub struct ChainModel {
    pub kernel: Arc<dyn Kernel>,
    reward: StateFn,
    discount_rate: Option<StateFn>,
}

impl fmt::Debug for ChainModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainModel")
            .field("kernel", &self.kernel.name())
            .field("discounted", &self.discount_rate.is_some())
            .finish()
    }
}

impl ChainModel {
    pub fn new(kernel: Arc<dyn Kernel>, reward: StateFn) -> Self {
        Self {
            kernel,
            reward,
            discount_rate: None,
        }
    }

    pub fn with_discount(mut self, beta: StateFn) -> Self {
        self.discount_rate = Some(beta);
        self
    }

    /// `β ≡ 0`, `r = 1` off the target and `0` on it, so `u*(x) = E_x T_A`.
    pub fn hitting_time(kernel: Arc<dyn Kernel>, target: Region) -> Self {
        Self::new(
            kernel,
            Arc::new(move |x| if target.contains(x) { 0.0 } else { 1.0 }),
        )
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    #[inline]
    pub fn reward(&self, x: &[f64]) -> f64 {
        (self.reward)(x)
    }

    /// `exp(-β(x))`; exactly 1 when undiscounted.
    #[inline]
    pub fn discount_factor(&self, x: &[f64]) -> f64 {
        match &self.discount_rate {
            Some(beta) => (-beta(x)).exp(),
            None => 1.0,
        }
    }

    #[inline]
    pub fn step(&self, x: &[f64], rng: &mut SimRng) -> Result<Vec<f64>, ChainError> {
        self.kernel.step(x, rng)
    }
}

/// One draw from `P(x, ·)`.
pub fn sample_first_transition(
    chain: &ChainModel,
    x: &[f64],
    rng: &mut SimRng,
) -> Result<Vec<f64>, ChainError> {
    if !chain.kernel.in_state_space(x) {
        return Err(ChainError::OutsideStateSpace(x.to_vec()));
    }
    chain.step(x, rng)
}

/// Path from `X_0 = x` to the first `n ≥ 1` with `X_n ∈ K ∪ A`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSegment {
    /// Discounted reward collected before the stop, plus the terminal reward
    /// when the stop is in the target.
    pub value: f64,
    /// Discount accumulated up to the stop if it is in `K`, else 0.
    pub weight: f64,
    pub steps: u64,
    pub terminal: Vec<f64>,
    pub in_target: bool,
}

pub fn simulate_segment(
    chain: &ChainModel,
    regions: &RegionSpec,
    x: &[f64],
    rng: &mut SimRng,
    step_cap: u64,
) -> Result<PathSegment, ChainError> {
    let mut value = 0.0;
    let mut disc = 1.0;
    let mut current = x.to_vec();
    for n in 1..=step_cap {
        value += disc * chain.reward(&current);
        disc *= chain.discount_factor(&current);
        let next = chain.step(&current, rng)?;
        if regions.in_target(&next) {
            value += disc * chain.reward(&next);
            return Ok(PathSegment {
                value,
                weight: 0.0,
                steps: n,
                terminal: next,
                in_target: true,
            });
        }
        if regions.in_window(&next) {
            return Ok(PathSegment {
                value,
                weight: disc,
                steps: n,
                terminal: next,
                in_target: false,
            });
        }
        current = next;
    }
    Err(ChainError::NonReturn { steps: step_cap })
}

/// Two-station fluid network observed just after each arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidNetwork {
    pub rate1: f64,
    pub rate2: f64,
    pub routing: f64,
    pub capacity: f64,
    pub interarrival_max: f64,
    pub arrival1_max: f64,
    pub arrival2_max: f64,
}

impl Default for FluidNetwork {
    fn default() -> Self {
        Self {
            rate1: 1.0,
            rate2: 1.0,
            routing: 0.4,
            capacity: 5.0,
            interarrival_max: 2.0,
            arrival1_max: 1.0,
            arrival2_max: 1.2,
        }
    }
}

impl FluidNetwork {
    /// Load minus capacity per unit time at each station; both negative
    /// means the unbuffered network is stable.
    pub fn stability_margins(&self) -> [f64; 2] {
        let mean_t = self.interarrival_max / 2.0;
        let ez1 = self.arrival1_max / 2.0;
        let ez2 = self.arrival2_max / 2.0;
        [
            ez1 - self.rate1 * mean_t,
            self.routing * ez1 + ez2 - self.rate2 * mean_t,
        ]
    }

    /// Drain over an interarrival of length `t`, add arrivals, cap each buffer.
    ///
    /// Station 1 is busy for `min(x1 / r1, t)`; meanwhile station 2 gains
    /// `routing · r1` and loses `r2` per unit time, floored at 0, then drains
    /// at `r2` for the rest of the interval. Capped overflow leaves the system.
    pub fn apply(&self, x: [f64; 2], t: f64, z1: f64, z2: f64) -> [f64; 2] {
        let busy = (x[0] / self.rate1).min(t);
        let during = (x[1] + (self.routing * self.rate1 - self.rate2) * busy).max(0.0);
        let after = (during - self.rate2 * (t - busy)).max(0.0);
        let x1 = (x[0] - self.rate1 * t).max(0.0) + z1;
        [x1.min(self.capacity), (after + z2).min(self.capacity)]
    }
}

impl Kernel for FluidNetwork {
    fn name(&self) -> &'static str {
        "fluid-network"
    }

    fn dim(&self) -> usize {
        2
    }

    fn in_state_space(&self, x: &[f64]) -> bool {
        x.len() == 2 && x.iter().all(|v| (0.0..=self.capacity).contains(v))
    }

    fn step(&self, x: &[f64], rng: &mut SimRng) -> Result<Vec<f64>, ChainError> {
        let t = uniform(rng, 0.0, self.interarrival_max);
        let z1 = uniform(rng, 0.0, self.arrival1_max);
        let z2 = uniform(rng, 0.0, self.arrival2_max);
        Ok(self.apply([x[0], x[1]], t, z1, z2).to_vec())
    }
}

/// Ordered Kiefer–Wolfowitz workload vector of a FIFO G/G/2 queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KieferWolfowitz {
    pub interarrival_max: f64,
    pub service_max: f64,
}

impl Default for KieferWolfowitz {
    fn default() -> Self {
        Self {
            interarrival_max: 2.0 / 0.6,
            service_max: 2.0 / 0.5,
        }
    }
}

impl KieferWolfowitz {
    pub fn apply(w: [f64; 2], a: f64, s: f64) -> [f64; 2] {
        let first = (w[0] - a).max(0.0) + s;
        let second = (w[1] - a).max(0.0);
        [first.min(second), first.max(second)]
    }
}

impl Kernel for KieferWolfowitz {
    fn name(&self) -> &'static str {
        "kiefer-wolfowitz"
    }

    fn dim(&self) -> usize {
        2
    }

    fn in_state_space(&self, x: &[f64]) -> bool {
        x.len() == 2 && 0.0 <= x[0] && x[0] <= x[1] && x[1].is_finite()
    }

    fn step(&self, x: &[f64], rng: &mut SimRng) -> Result<Vec<f64>, ChainError> {
        let a = uniform(rng, 0.0, self.interarrival_max);
        let s = uniform(rng, 0.0, self.service_max);
        Ok(Self::apply([x[0], x[1]], a, s).to_vec())
    }
}

/// `X_{n+1} = (X_n + Z_{n+1}) / 2` with fair bits `Z`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BernoulliConvolution;

impl BernoulliConvolution {
    #[inline]
    pub fn apply(x: f64, bit: bool) -> f64 {
        (x + if bit { 1.0 } else { 0.0 }) / 2.0
    }
}

impl Kernel for BernoulliConvolution {
    fn name(&self) -> &'static str {
        "bernoulli-convolution"
    }

    fn dim(&self) -> usize {
        1
    }

    fn in_state_space(&self, x: &[f64]) -> bool {
        x.len() == 1 && (0.0..=1.0).contains(&x[0])
    }

    fn step(&self, x: &[f64], rng: &mut SimRng) -> Result<Vec<f64>, ChainError> {
        Ok(vec![Self::apply(x[0], rng.random::<bool>())])
    }
}

/// Fixed-scan Gibbs sampler for `π(x) ∝ (2 − x1²)(2 − x2²)(2 + x1 x2)` on `[-1, 1]²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsSampler;

/// Upper bound of the conditional density on `[-1, 1]`: (3/20)·2·3.
const GIBBS_ENVELOPE: f64 = 0.9;

impl GibbsSampler {
    /// `π(y | other) = (3/20)(2 − y²)(2 + y·other)` on `[-1, 1]`.
    #[inline]
    pub fn conditional_density(y: f64, other: f64) -> f64 {
        if !(-1.0..=1.0).contains(&y) {
            return 0.0;
        }
        0.15 * (2.0 - y * y) * (2.0 + y * other)
    }

    pub fn sample_conditional(other: f64, rng: &mut SimRng) -> Result<f64, ChainError> {
        for _ in 0..REJECTION_CAP {
            let y = uniform(rng, -1.0, 1.0);
            let u = uniform(rng, 0.0, GIBBS_ENVELOPE);
            if u <= Self::conditional_density(y, other) {
                return Ok(y);
            }
        }
        Err(ChainError::SamplerExhausted {
            attempts: REJECTION_CAP,
        })
    }

    /// Transition density with respect to Lebesgue measure on `[-1, 1]²`.
    pub fn transition_density_lebesgue(x: &[f64], y: &[f64]) -> f64 {
        Self::conditional_density(y[0], x[1]) * Self::conditional_density(y[1], y[0])
    }

    /// Transition density with respect to `η = Uniform([-1, 1]²)`.
    pub fn transition_density_uniform(x: &[f64], y: &[f64]) -> f64 {
        4.0 * Self::transition_density_lebesgue(x, y)
    }

    /// Exact draw from the target: `x1` from its marginal `∝ 2 − x1²` by
    /// inverse-CDF bisection, then `x2` from `π(· | x1)`.
    pub fn sample_stationary(rng: &mut SimRng) -> Result<[f64; 2], ChainError> {
        let u: f64 = rng.random();
        // Marginal CDF: (2t − t³/3 + 5/3) / (10/3).
        let cdf = |t: f64| (2.0 * t - t * t * t / 3.0 + 5.0 / 3.0) * 0.3;
        let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x1 = 0.5 * (lo + hi);
        let x2 = Self::sample_conditional(x1, rng)?;
        Ok([x1, x2])
    }
}

impl Kernel for GibbsSampler {
    fn name(&self) -> &'static str {
        "gibbs-sampler"
    }

    fn dim(&self) -> usize {
        2
    }

    fn in_state_space(&self, x: &[f64]) -> bool {
        x.len() == 2 && x.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    fn step(&self, x: &[f64], rng: &mut SimRng) -> Result<Vec<f64>, ChainError> {
        let y1 = Self::sample_conditional(x[1], rng)?;
        let y2 = Self::sample_conditional(y1, rng)?;
        Ok(vec![y1, y2])
    }

    fn density(&self) -> Option<&dyn TransitionDensity> {
        Some(self)
    }
}

impl TransitionDensity for GibbsSampler {
    fn density_wrt_reference(&self, x: &[f64], y: &[f64]) -> f64 {
        Self::transition_density_uniform(x, y)
    }

    fn sample_reference(&self, rng: &mut SimRng) -> Vec<f64> {
        vec![uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)]
    }
}
