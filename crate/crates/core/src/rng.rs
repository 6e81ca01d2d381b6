//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator. Independent
//! streams (per realization, per trial, per purpose) are derived from a base
//! seed and a tag path so that results never depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::C64;

pub type SimRng = ChaCha8Rng;

/// Stream tags used when deriving generators.
pub mod stream {
    pub const CHANNEL: u64 = 0x4348;
    pub const LABEL_NOISE: u64 = 0x4c4e;
    pub const RX_NOISE: u64 = 0x5258;
    pub const CORRUPTION: u64 = 0x434f;
    pub const ANGLE: u64 = 0x414e;
    pub const SPLIT: u64 = 0x5350;
    pub const INIT: u64 = 0x494e;
    pub const SHUFFLE: u64 = 0x5348;
    pub const DROPOUT: u64 = 0x4450;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &tag| splitmix(acc ^ splitmix(tag)))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn derived(seed: u64, path: &[u64]) -> SimRng {
    seeded(derive_seed(seed, path))
}

/// Draws from CN(0, variance): each real component has variance `variance / 2`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
