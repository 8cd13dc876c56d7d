//! Deterministic seed derivation.
//!
//! Every random decision in a run (init, shuffles, box jitter, per-sample
//! synthesis) draws from its own ChaCha stream whose seed is derived from
//! the run seed plus a purpose tag, so resuming or parallelizing never
//! perturbs any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 0x01;
pub const TAG_SHUFFLE: u64 = 0x02;
pub const TAG_BOX: u64 = 0x03;
pub const TAG_SYNTH: u64 = 0x04;
pub const TAG_SPLIT: u64 = 0x05;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Fold an arbitrary tag sequence into one child seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &p in parts {
        s = splitmix64(s ^ splitmix64(p));
    }
    s
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a = derive_seed(42, &[TAG_SHUFFLE, 3]);
        let b = derive_seed(42, &[TAG_SHUFFLE, 3]);
        let c = derive_seed(42, &[TAG_SHUFFLE, 4]);
        let d = derive_seed(42, &[TAG_BOX, 3]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn rng_reproduces_sequence() {
        let mut r1 = rng_for(7, &[TAG_SYNTH, 0]);
        let mut r2 = rng_for(7, &[TAG_SYNTH, 0]);
        for _ in 0..16 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
