//! Seeded randomness. Every random draw in the crate starts here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of indices into a fresh seed.
///
/// Stable across platforms and releases: manifests record seeds produced
/// by this function.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        let mut seen = HashSet::new();
        for base in 0..4 {
            for i in 0..500 {
                for v in 0..2 {
                    assert!(seen.insert(derive(base, &[i, v])));
                }
            }
        }
    }
}
