//! Independent PRNG streams derived from a run seed.

use emdt_core::numeric::Prng;

/// What a stream is used for; part of the derivation so that, say, the
/// SMOTE stream of seed 3 never coincides with the sampling stream of
/// seed 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Train = 1,
    Init = 2,
    Cluster = 3,
    Generate = 4,
    Smote = 5,
    Dcr = 6,
}

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, purpose: Purpose, index: u64) -> u64 {
    let a = finalize(seed ^ 0x6A09_E667_F3BC_C908);
    let b = finalize(a ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    finalize(b ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Prng {
    Prng::new(derive(seed, purpose, index))
}
