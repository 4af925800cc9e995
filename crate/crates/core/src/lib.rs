//! Neural solutions of the linear equations of first-transition analysis for
//! Markov chains: expected hitting times (minimal Lyapunov functions),
//! Poisson's equation, and stationary densities.
//!
//! The pieces:
//!
//! - [`neural`]: the network `u_θ`, its exact parameter gradient, and the
//!   SGD/Adam optimizers.
//! - [`chains`]: Markov kernels (fluid network, G/G/2 workload, Bernoulli
//!   convolution, Gibbs sampler), regions, and path segments.
//! - [`rga`]: double-sampled residuals and the residual-gradient trainer.
//! - [`oracles`]: Monte Carlo hitting times, closed forms, lattices, CSV.
//! - [`runner`]: the four reproducible experiments wired end to end.

pub mod chains;
pub mod format;
pub mod neural;
pub mod oracles;
pub mod quad;
pub mod rga;
pub mod rng;
pub mod runner;

pub use chains::{ChainModel, Kernel, PathSegment, Region, RegionSpec};
pub use neural::{Activation, Approximator, Mlp, PinnedNet};
pub use oracles::{GridSpec, OracleEstimate};
pub use runner::{ExperimentConfig, ExperimentId, Summary};
pub use rga::{LossEstimate, Objective, TrainConfig, TrainOutcome, Trainer};
