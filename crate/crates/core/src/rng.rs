//! Indexed random substreams.
//!
//! Every independent unit of randomness (an individual in a cohort, a
//! replication in an experiment, a bootstrap resample) gets its own generator
//! whose seed is a pure function of `(master seed, index)`. Results therefore
//! do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every substream.
pub type StreamRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function applied to `state + golden gamma`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `index` under `master`.
pub fn substream_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA))
}

/// Generator for substream `index` under `master`.
pub fn substream(master: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(substream_seed(master, index))
}

/// Derives a child master seed for a named purpose, so that e.g. the cohort
/// and the G-computation Monte Carlo of one replication never share streams.
pub fn derive(master: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(master) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}
