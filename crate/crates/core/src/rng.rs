//! Seeded, splittable normal streams.
//!
//! Every consumer (one particle of one run, or the observation noise of a
//! problem) owns a ChaCha8 generator keyed by the seed and addressed by a
//! 64-bit stream id, so draws never depend on scheduling or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Particle index reserved for auxiliary streams (observation noise, truth
/// sampling, subsampling).
pub const AUX_PARTICLE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub run: u32,
    pub particle: u32,
}

impl StreamId {
    pub fn new(run: u32, particle: u32) -> Self {
        Self { run, particle }
    }

    fn word(self) -> u64 {
        (u64::from(self.run) << 32) | u64::from(self.particle)
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id.word());
        Self { seed, id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn index(&mut self, upper: usize) -> usize {
        self.inner.random_range(0..upper)
    }
}

/// One stream per particle of a run.
pub fn particle_streams(seed: u64, run: u32, count: usize) -> Vec<RngStream> {
    (0..count)
        .map(|j| RngStream::new(seed, StreamId::new(run, j as u32)))
        .collect()
}
