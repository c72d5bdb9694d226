//! Hierarchical, counter-based seeding.
//!
//! A [`SeedTree`] node is a 64-bit key; children are derived by mixing the
//! parent key with a child index, so any stream (seed → macro → iteration →
//! replication) can be reconstructed without touching its siblings. Cells that
//! consume different numbers of draws therefore never shift each other's
//! streams, which is what common random numbers across estimators relies on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every stream in the crate.
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix64(seed) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn child(&self, index: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    /// Shorthand for a chain of `child` calls.
    pub fn path(&self, indices: &[u64]) -> Self {
        indices.iter().fold(*self, |node, &i| node.child(i))
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.key)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
