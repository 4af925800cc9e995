//! Seedable, splittable random streams.
//!
//! Every random draw in the crate comes from a [`SimRng`] obtained through
//! [`Streams`]. A stream is addressed by `(seed, domain, index)`: the seed and
//! domain form the ChaCha key and the index selects the ChaCha stream, so any
//! two distinct addresses yield independent sequences and a given address is
//! reproducible regardless of the order in which streams are opened.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Stream domains. Each consumer owns a disjoint domain.
pub mod domain {
    pub const INIT: u64 = 0x01;
    pub const TRAIN: u64 = 0x10;
    pub const LOSS_LOG: u64 = 0x20;
    pub const PROBE: u64 = 0x30;
    pub const ORACLE: u64 = 0x40;
    pub const TEST: u64 = 0xF0;
}

/// Factory for addressed random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Opens the stream `(domain, index)`.
    pub fn rng(&self, domain: u64, index: u64) -> SimRng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// Three streams for one training or probe sample: the anchor draw, the
    /// forward draw(s) and the mirror draw(s).
    ///
    /// `domain` must be one of the base domains in [`domain`]; the three
    /// streams use `domain`, `domain + 1`, `domain + 2`.
    pub fn sample_streams(&self, domain: u64, index: u64) -> SampleStreams {
        SampleStreams {
            anchor: self.rng(domain, index),
            forward: self.rng(domain + 1, index),
            mirror: self.rng(domain + 2, index),
        }
    }
}

/// Disjoint streams backing one double-sampled residual.
#[derive(Debug, Clone)]
pub struct SampleStreams {
    pub anchor: SimRng,
    pub forward: SimRng,
    pub mirror: SimRng,
}

/// Uniform draw on `[lo, hi)`.
#[inline]
pub fn uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
