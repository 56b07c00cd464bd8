//! Project-wide random number generation.
//!
//! Every stochastic routine takes an explicit [`SimRng`]. Parallel work gets
//! one independent stream per task so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a purpose tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Independent stream `index` of the generator keyed by `(seed, tag)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> SimRng {
    let mut r = SimRng::seed_from_u64(derive_seed(seed, tag));
    r.set_stream(index);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, 1, 3).random();
        let b: u64 = stream(7, 1, 3).random();
        let c: u64 = stream(7, 1, 4).random();
        let d: u64 = stream(7, 2, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
