//! Counter-based random streams.
//!
//! Every random draw in the engine comes from a stream addressed by
//! `(seed, site, step)`, so results do not depend on the order in which
//! layers or batches are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known site ids. Layer-specific sites are derived with [`site`].
pub mod sites {
    pub const SHUFFLE: u64 = 1;
    pub const SYNTH_GRAPH: u64 = 2;
    pub const SYNTH_WALK: u64 = 3;
    pub const SYNTH_FEATURES: u64 = 4;
    pub const INIT: u64 = 16;
    pub const DROPOUT: u64 = 32;
}

/// Builds a deterministic stream keyed by `(seed, site, step)`.
pub fn stream(seed: u64, site: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&site.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..32].copy_from_slice(b"nestrec\0");
    ChaCha8Rng::from_seed(key)
}

/// Mixes a base site with a sub-index (layer number, parameter slot).
pub fn site(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Stable 64-bit hash of a string, for naming sites after parameters.
pub fn name_site(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
