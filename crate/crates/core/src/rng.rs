//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness (task sampling, edge dropping, parameter
//! initialization, evaluation) draws from its own stream so that changing
//! how often one consumer draws never shifts the numbers another one sees.
//! Variants that share a root seed therefore see identical task sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SAMPLER: &str = "sampler";
pub const DROPEDGE: &str = "dropedge";
pub const INIT: &str = "init";
pub const EVAL: &str = "eval";
pub const VALIDATION: &str = "validation";
pub const DROPOUT: &str = "dropout";
pub const DATA: &str = "data";
pub const SPLIT: &str = "split";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Seed of the `index`-th stream under `name`.
    pub fn seed(&self, name: &str, index: u64) -> u64 {
        let mut h = splitmix64(self.root ^ fnv1a(name.as_bytes()));
        h = splitmix64(h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        h
    }

    pub fn stream(&self, name: &str, index: u64) -> Rng {
        Rng::seed_from_u64(self.seed(name, index))
    }
}

/// Convenience for call sites that only need one plain seeded stream.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
