//! Seed discipline for every sampler in the toolkit.
//!
//! Each (seed, stream, path) triple owns an independent ChaCha stream, so a
//! path's noise never depends on scheduling, chunking, or thread count, and
//! two runs that share a seed see identical noise path by path. Common
//! random numbers across strategy evaluations fall out of this for free;
//! explicit decorrelation is opt-in via [`decorrelate`].

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose label separating independent noise streams under one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Market and surplus drivers of the outer simulation.
    Drivers = 1,
    /// Signal endpoints and bridge refinements.
    Bridge = 2,
    /// Inner samples of nested conditional expectations.
    InnerMc = 3,
    /// Backward-solver regression paths.
    Bsde = 4,
    /// Direction perturbations for stationarity probes.
    Probe = 5,
}

/// RNG for one path of one purpose under one master seed.
pub fn stream_rng(seed: u64, stream: Stream, path: u64) -> ChaCha12Rng {
    debug_assert!(path < 1 << 48);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | path);
    rng
}

/// Deterministically derive an unrelated seed, for runs that must not share
/// noise with their baseline (breaking common random numbers on purpose).
pub fn decorrelate(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the salted seed
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
