//! Counter-keyed Gaussian noise.
//!
//! Every noise field is a pure function of `(seed, step, stream, lane)`, so
//! changing the number of guidance terms, samples or threads never shifts
//! which noise a given chain sees.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::field::{Field, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    SamplerNoise,
    InitLatent,
    Diagnostics,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::SamplerNoise => 0x5a4d_504c_4e4f_4953,
            Stream::InitLatent => 0x494e_4954_4c41_5445,
            Stream::Diagnostics => 0x4449_4147_4e4f_5354,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
    pub stream: Stream,
    /// Sample index within a batch.
    pub lane: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, step: u64, stream: Stream, lane: u64) -> Self {
        NoiseKey { seed, step, stream, lane }
    }

    fn rng(&self) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.step.to_le_bytes());
        key[16..24].copy_from_slice(&self.stream.tag().to_le_bytes());
        key[24..32].copy_from_slice(&self.lane.to_le_bytes());
        ChaCha12Rng::from_seed(key)
    }
}

/// Standard-normal i.i.d. field for `key`.
pub fn draw_noise(key: NoiseKey, shape: Shape) -> Field {
    let mut rng = key.rng();
    let values = (0..shape.volume())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Field::from_raw(shape, values)
}

/// Uniform `u64`s for the same key, used by permutation tests.
pub fn uniform_stream(key: NoiseKey) -> impl rand::Rng {
    key.rng()
}
