//! Fixtures shared by the criterion benches in `benches/`.

use ftarga::chains::{BernoulliConvolution, FluidNetwork, GibbsSampler, Kernel, KieferWolfowitz};
use ftarga::neural::{Activation, Mlp, ScaleRule};
use ftarga::rga::TrainConfig;

/// Single-hidden-layer sigmoid network, as trained by every experiment.
pub fn sigmoid_net(input_dim: usize, width: usize) -> Mlp {
    Mlp::init(0, input_dim, &[width], Activation::Sigmoid, None, ScaleRule::FanIn)
        .expect("valid bench network")
}

/// A trainer config that never finishes or logs, for timing single steps.
pub fn endless_config() -> TrainConfig {
    TrainConfig {
        iterations: u64::MAX,
        log_every: u64::MAX,
        log_samples: 2,
        ..TrainConfig::default()
    }
}

/// Each chain with a representative interior start.
pub fn kernels() -> Vec<(&'static str, Box<dyn Kernel>, Vec<f64>)> {
    vec![
        ("fluid", Box::new(FluidNetwork::default()), vec![2.0, 3.0]),
        ("kiefer-wolfowitz", Box::new(KieferWolfowitz::default()), vec![4.0, 6.0]),
        ("bernoulli", Box::new(BernoulliConvolution), vec![0.3]),
        ("gibbs", Box::new(GibbsSampler), vec![0.2, -0.4]),
    ]
}
