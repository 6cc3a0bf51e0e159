//! Deterministic random-stream derivation.
//!
//! Every consumer of randomness (dataset generation, noise for a given
//! sample and trial, training) derives its generator from an explicit seed
//! plus integer coordinates, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used across the crate.
pub type Rng = ChaCha8Rng;

/// Purpose tags keep streams for different roles disjoint even when they
/// share a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Channel = 1,
    Split = 2,
    Noise = 3,
    Train = 4,
    Init = 5,
    Cluster = 6,
    Codebook = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root generator for `(seed, purpose)`.
pub fn stream(seed: u64, purpose: Purpose) -> Rng {
    Rng::seed_from_u64(splitmix(seed ^ splitmix(purpose as u64)))
}

/// Per-item sub-stream: `(seed, purpose, trial)` picks the key and
/// `item` picks the ChaCha stream.
pub fn sub_stream(seed: u64, purpose: Purpose, trial: u64, item: u64) -> Rng {
    let key = splitmix(seed ^ splitmix(purpose as u64) ^ splitmix(trial.wrapping_add(0x51)));
    let mut rng = Rng::seed_from_u64(key);
    rng.set_stream(item);
    rng
}

/// Noise stream shared by every search method for one `(sample, trial)`,
/// so method comparisons see paired noise.
pub fn noise_stream(seed: u64, trial: u64, sample_id: u64) -> Rng {
    sub_stream(seed, Purpose::Noise, trial, sample_id)
}
