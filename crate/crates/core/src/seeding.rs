//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by a tuple of integers mixed into the
//! master seed, so the draws an agent sees never depend on which thread ran it
//! or in what order agents were scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every stream.
pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams for different jobs disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Rollout = 1,
    Noise = 2,
    Schedule = 3,
    PreRoundLength = 4,
    Instance = 5,
    Learning = 6,
    Segmentation = 7,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed`, a purpose tag and a list of counters into a new 64-bit seed.
pub fn derive_seed(seed: u64, purpose: Purpose, counters: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ (purpose as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

/// Opens the stream identified by `(seed, purpose, counters)`.
pub fn stream(seed: u64, purpose: Purpose, counters: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, purpose, counters))
}
