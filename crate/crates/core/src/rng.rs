//! Counter-based deterministic randomness.
//!
//! Every random draw in the crate is derived from a [`SeedKey`]
//! `(seed, round, worker)` plus a stream tag, so sender and receiver (or two
//! runs of the simulator) reproduce identical draws without exchanging state
//! and without depending on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Stream tags separating independent uses of the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    RandKIndices = 1,
    Natural = 2,
    RankRTest = 3,
    UplinkTime = 4,
    DownlinkTime = 5,
    ProblemData = 6,
    SizeProposal = 7,
    Synth = 8,
    Payload = 9,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedKey {
    pub seed: u64,
    pub round: u64,
    pub worker: u64,
}

impl SeedKey {
    pub const fn new(seed: u64, round: u64, worker: u64) -> Self {
        Self { seed, round, worker }
    }

    pub const fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0, 0)
    }

    /// Generator for one `(key, stream)` pair.
    pub fn rng(&self, stream: Stream) -> ChaCha12Rng {
        let mut bytes = [0u8; 32];
        let words = [
            splitmix64(self.seed),
            splitmix64(self.round ^ 0x6a09_e667_f3bc_c908),
            splitmix64(self.worker ^ 0xbb67_ae85_84ca_a73b),
            splitmix64(stream as u64 ^ 0x3c6e_f372_fe94_f82b),
        ];
        for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha12Rng::from_seed(bytes)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
