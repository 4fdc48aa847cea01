//! Seeding helpers. Every random decision in the crate flows from a
//! PCG64 stream derived from one user-visible `u64` seed.

use rand_pcg::Pcg64;

/// splitmix64 finalizer; used to derive independent sub-seeds from
/// (seed, salt) pairs so stages, epochs and scenes get decorrelated
/// streams without consuming each other's draws.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn pcg(seed: u64) -> Pcg64 {
    use rand::SeedableRng;
    Pcg64::seed_from_u64(seed)
}

pub fn pcg_salted(seed: u64, salt: u64) -> Pcg64 {
    pcg(mix(seed, salt))
}
