//! Keyed random streams.
//!
//! Every random draw in an experiment comes from a ChaCha8 stream selected by
//! `(seed, stream)`. Seeds for independent purposes are derived from the
//! master seed by mixing in a domain tag, so replicas can be generated in any
//! order (or in parallel) and still reproduce bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags used with [`derive_seed`].
pub mod domain {
    pub const INITIAL_LAW: u64 = 0x1;
    pub const CHAIN: u64 = 0x2;
    pub const BOOTSTRAP: u64 = 0x3;
    pub const WITNESS: u64 = 0x4;
    pub const VALIDATION: u64 = 0x5;
}

/// The ChaCha8 generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for `(domain, index)` from a master seed.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ domain) ^ index)
}
