//! Seed plumbing. Every random draw in the crate flows from an explicit u64
//! seed through ChaCha8, so a (config, seed) pair pins the whole trajectory.
//!
//! Sub-seeds are derived with splitmix64 so that streams for different
//! purposes (episode sampling, head init, proposal jitter) never alias even
//! when their tags are small consecutive integers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived seed streams. Keeping them in one place makes the
/// derivation auditable; the values themselves are arbitrary but frozen.
pub mod tags {
    pub const MODEL_INIT: u64 = 0x01;
    pub const EPISODE: u64 = 0x02;
    pub const HEAD_INIT: u64 = 0x03;
    pub const SCENE: u64 = 0x04;
    pub const PROPOSALS: u64 = 0x05;
    pub const GRADCHECK: u64 = 0x06;
    pub const EVAL_GROUP: u64 = 0x07;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a purpose/index tag.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Derives a child seed two levels deep (purpose tag, then index).
pub fn mix2(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed, tag), index)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mix_is_deterministic_and_tag_sensitive() {
        assert_eq!(mix(42, 1), mix(42, 1));
        assert_ne!(mix(42, 1), mix(42, 2));
        assert_ne!(mix(42, 1), mix(43, 1));
    }

    #[test]
    fn consecutive_tags_do_not_alias() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..50u64 {
            for tag in 0..50u64 {
                assert!(seen.insert(mix(seed, tag)), "collision at seed={seed} tag={tag}");
            }
        }
    }

    #[test]
    fn rng_streams_reproduce() {
        let a: Vec<u64> = (0..8).map(|_| 0).scan(rng_from(7), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..8).map(|_| 0).scan(rng_from(7), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
    }
}
