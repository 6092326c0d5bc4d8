//! Keyed random streams.
//!
//! Every draw is addressed by a [`StreamKey`]. The key tuple is packed into the
//! 256-bit ChaCha key and the lane selects the ChaCha stream id, so each key
//! owns an independent counter-mode sequence. Nothing depends on the order in
//! which keys are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sub-stream selector inside one draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lane {
    /// Scalar noise of analytic families.
    Noise,
    /// Dropout mask of the given hidden layer.
    Mask(u32),
}

impl Lane {
    fn stream_id(self) -> u64 {
        match self {
            Lane::Noise => 0,
            Lane::Mask(layer) => 1 + u64::from(layer),
        }
    }
}

/// Address of one stochastic draw: `(seed, replicate, level, inner, lane)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub replicate: u64,
    pub level: u64,
    pub inner: u64,
    pub lane: Lane,
}

impl StreamKey {
    pub fn new(seed: u64, replicate: u64, level: u64, inner: u64) -> Self {
        Self {
            seed,
            replicate,
            level,
            inner,
            lane: Lane::Noise,
        }
    }

    /// Key of a whole replicate; the inner index is filled in per draw.
    pub fn replicate(seed: u64, replicate: u64, level: u64) -> Self {
        Self::new(seed, replicate, level, 0)
    }

    pub fn with_inner(self, inner: u64) -> Self {
        Self { inner, ..self }
    }

    pub fn with_lane(self, lane: Lane) -> Self {
        Self { lane, ..self }
    }

    /// Generator positioned at the start of this key's stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.replicate.to_le_bytes());
        bytes[16..24].copy_from_slice(&self.level.to_le_bytes());
        bytes[24..32].copy_from_slice(&self.inner.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(self.lane.stream_id());
        rng
    }
}

/// Derive a child seed from a master seed and a tag. SplitMix64 finaliser.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
