//! Counter-derived random streams.
//!
//! Every trajectory, walker and window draws from its own generator whose
//! seed is a hash of `(master seed, task name, indices...)`. Results depend
//! only on that assignment, never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every stream.
pub type StreamRng = ChaCha8Rng;

/// Name recorded in run manifests.
pub const GENERATOR_NAME: &str = "ChaCha8 (rand_chacha 0.9), seeds via splitmix64/FNV-1a key hashing";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

/// 64-bit key for `(master, task, indices)`.
pub fn derive_seed(master: u64, task: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ fnv1a(task.as_bytes()));
    for (k, &i) in indices.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(i.wrapping_add((k as u64 + 1) << 56)));
    }
    h
}

/// Stream keyed by task name and index path under one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    pub master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn seed(&self, task: &str, indices: &[u64]) -> u64 {
        derive_seed(self.master, task, indices)
    }

    pub fn rng(&self, task: &str, indices: &[u64]) -> StreamRng {
        let mut key = [0u8; 32];
        let mut s = self.seed(task, indices);
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        StreamRng::from_seed(key)
    }

    /// Child tree whose master seed is derived from this one.
    pub fn child(&self, task: &str, indices: &[u64]) -> SeedTree {
        SeedTree::new(self.seed(task, indices))
    }
}
