//! Seeded random streams.
//!
//! Every episode owns one ChaCha key. Environment randomness and the two
//! per-decision streams (chain noise and start selection) read disjoint
//! ChaCha streams under that key, so changing how many draws one consumer
//! makes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ENV_STREAM: u64 = 0;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn env_rng(episode_seed: u64) -> ChaCha8Rng {
    stream(episode_seed, ENV_STREAM)
}

/// Streams consumed by one decision.
#[derive(Debug, Clone)]
pub struct DecisionRngs {
    /// Initial noise and stochastic sampler steps.
    pub chain: ChaCha8Rng,
    /// Exploration and candidate draws.
    pub select: ChaCha8Rng,
}

impl DecisionRngs {
    pub fn new(episode_seed: u64, decision: usize) -> Self {
        let base = 1 + 2 * decision as u64;
        DecisionRngs {
            chain: stream(episode_seed, base),
            select: stream(episode_seed, base + 1),
        }
    }
}
