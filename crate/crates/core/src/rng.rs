//! Seed splitting.
//!
//! Every random stream is derived from one 64-bit user seed. A stream is
//! identified by a domain tag (what the randomness is for) and an index (which
//! trial, calibration set, or trajectory). The ChaCha8 key is
//! `splitmix64(seed ^ splitmix64(domain))` and the ChaCha stream id is the
//! index, so streams never overlap and do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags for [`stream`].
pub mod domain {
    pub const TRIAL: u64 = 0x7472_6961_6c00_0001;
    pub const CALIBRATION: u64 = 0x6361_6c69_6200_0002;
    pub const BASELINE: u64 = 0x6261_7365_6c00_0003;
    pub const SCENE: u64 = 0x7363_656e_6500_0004;
    pub const ORACLE: u64 = 0x6f72_6163_6c00_0005;
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}
