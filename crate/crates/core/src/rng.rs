//! Reproducible Gaussian noise streams.
//!
//! Every independent piece of randomness (the truth path, one filter
//! replica, one multilevel sample) draws from its own stream whose key is
//! derived hierarchically from the experiment seed, e.g.
//! `root(seed).child(REPLICA).child(r).child(level).child(m)`. A stream
//! depends only on its key, never on scheduling order, so results are
//! identical for any worker count.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Source of iid standard normal draws.
pub trait GaussianSource {
    fn standard_normal(&mut self) -> f64;
}

impl<G: GaussianSource + ?Sized> GaussianSource for &mut G {
    #[inline(always)]
    fn standard_normal(&mut self) -> f64 {
        (**self).standard_normal()
    }
}

/// Purpose tags used when deriving child keys.
pub mod tag {
    pub const OBSERVATIONS: u64 = 0x0b5e;
    pub const REPLICA: u64 = 0x4e91;
    pub const ENKF: u64 = 0xe4f;
    pub const MLENKF: u64 = 0x31e4f;
    pub const MIENKF: u64 = 0x41e4f;
    pub const LEVEL: u64 = 0x1e7e1;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hierarchical stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x6d6c_656e_6b66))
    }

    pub fn child(self, index: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(index.wrapping_mul(GOLDEN) ^ 0xa5a5)))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn stream(self) -> RngStream {
        RngStream::new(self)
    }
}

/// Xoshiro256++ generator producing standard normals by the ziggurat method.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: Xoshiro256PlusPlus,
}

impl RngStream {
    pub fn new(key: StreamKey) -> Self {
        RngStream {
            rng: Xoshiro256PlusPlus::seed_from_u64(key.raw()),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(StreamKey::root(seed))
    }
}

impl GaussianSource for RngStream {
    #[inline(always)]
    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// Always returns zero: forces vanishing Brownian increments and
/// observation perturbations in deterministic tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl GaussianSource for ZeroNoise {
    #[inline(always)]
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

/// Replays a fixed sequence of draws, then panics.
#[derive(Clone, Debug)]
pub struct Scripted {
    draws: Vec<f64>,
    pos: usize,
}

impl Scripted {
    pub fn new(draws: Vec<f64>) -> Self {
        Scripted { draws, pos: 0 }
    }
}

impl GaussianSource for Scripted {
    fn standard_normal(&mut self) -> f64 {
        let z = *self
            .draws
            .get(self.pos)
            .expect("scripted noise source exhausted");
        self.pos += 1;
        z
    }
}

/// Wraps a source and keeps every draw it hands out.
#[derive(Debug)]
pub struct Recorder<G> {
    inner: G,
    pub draws: Vec<f64>,
}

impl<G: GaussianSource> Recorder<G> {
    pub fn new(inner: G) -> Self {
        Recorder {
            inner,
            draws: Vec::new(),
        }
    }
}

impl<G: GaussianSource> GaussianSource for Recorder<G> {
    fn standard_normal(&mut self) -> f64 {
        let z = self.inner.standard_normal();
        self.draws.push(z);
        z
    }
}
