//! Seed ladder: one top-level seed fans out into independent per-purpose streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed purposes. Each purpose owns its own index space so that adding
/// episodes (or evaluation seeds) never shifts the seeds of earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Split,
    Probe,
    TraineeInit,
    BatchOrder,
    PolicySampling,
    PolicyInit,
    PpoShuffle,
    EvalInit,
    EvalBatchOrder,
    SearchInit,
    SearchBatchOrder,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Split => 1,
            Purpose::Probe => 2,
            Purpose::TraineeInit => 3,
            Purpose::BatchOrder => 4,
            Purpose::PolicySampling => 5,
            Purpose::PolicyInit => 6,
            Purpose::PpoShuffle => 7,
            Purpose::EvalInit => 8,
            Purpose::EvalBatchOrder => 9,
            Purpose::SearchInit => 10,
            Purpose::SearchBatchOrder => 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedLadder {
    root: u64,
}

impl SeedLadder {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, purpose: Purpose, index: u64) -> u64 {
        mix(mix(mix(self.root) ^ purpose.tag()) ^ index)
    }
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
