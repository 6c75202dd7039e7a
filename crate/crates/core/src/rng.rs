//! Seeding discipline.
//!
//! Every random decision in a run is drawn from a ChaCha12 stream addressed
//! by `(seed, query, purpose)`. Two runs that share a seed therefore replay
//! the same noise even when they consume different numbers of draws per
//! query, which is what makes equal-budget personalized runs reduce to the
//! baseline bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a stream's draws are spent on. The discriminants are packed into the
/// low bits of the stream id, so they must stay below 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Threshold-check noise (one draw per gated query).
    Gate = 0,
    /// Per-class argmax noise (one draw per class).
    Answer = 1,
    /// Teacher schedules and synthetic vote sampling.
    Schedule = 2,
    /// Ground-truth class generation for synthetic query sets.
    Truth = 3,
}

/// The stream that answers `purpose` for `query` under `seed`.
pub fn stream_rng(seed: u64, query: u64, purpose: Purpose) -> ChaCha12Rng {
    debug_assert!(query < (1 << 61));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((query << 3) | purpose as u64);
    rng
}

/// Derives the seed of repetition `index` from a master seed. Splitmix64's
/// output function scrambles even consecutive indices into unrelated seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
