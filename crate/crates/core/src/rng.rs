//! Counter-based derivation of independent random substreams.
//!
//! Every scalar component of every array entry in every replica gets its own
//! generator, keyed by `(seed, replica, row, column, component)`. Nothing is
//! shared between keys, so replicas can be evaluated in any order on any
//! number of threads and still reproduce bit for bit.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn absorb(state: u64, word: u64) -> u64 {
    mix(state.wrapping_add(GOLDEN) ^ mix(word.wrapping_add(GOLDEN)))
}

/// Root of a family of reproducible streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed(u64);

impl StreamSeed {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Streams for one Monte Carlo replica (or one independent draw).
    pub fn replica(self, index: u64) -> ReplicaStream {
        ReplicaStream {
            key: absorb(mix(self.0 ^ 0x5157_4953_4841_5254), index),
        }
    }
}

/// All randomness of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaStream {
    key: u64,
}

impl ReplicaStream {
    /// Streams for the array entry at global position `(row, col)`.
    #[inline]
    pub fn entry(&self, row: u64, col: u64) -> EntryStream {
        EntryStream {
            key: absorb(absorb(self.key, row), col),
        }
    }
}

/// All randomness of one array entry within one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryStream {
    key: u64,
}

impl EntryStream {
    /// Generator for one real component (0 = real part, 1..=3 = imaginary
    /// units) of the entry's path.
    #[inline]
    pub fn component(&self, component: u32) -> SplitMix64 {
        SplitMix64::seed_from_u64(absorb(self.key, u64::from(component)))
    }
}
