//! Counter-based random streams.
//!
//! A stream is identified by `(seed, replication, role)`. ChaCha8 is keyed by
//! the seed and the 64-bit stream word encodes replication and role, so any
//! replication can be regenerated independently of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Data = 0,
    Bootstrap = 1,
    Oracle = 2,
}

/// Identity of one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomStream {
    pub seed: u64,
    pub replication: u64,
    pub role: StreamRole,
}

impl RandomStream {
    pub fn new(seed: u64, replication: u64, role: StreamRole) -> Self {
        Self { seed, replication, role }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.replication << 2) | self.role as u64);
        rng
    }
}
