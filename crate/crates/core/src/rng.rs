//! Seed derivation. Every random stream in the pipeline is derived from one
//! global seed plus a stable name, so stages and workers never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and compiler versions.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a parent seed and a stream name.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(stable_hash(name.as_bytes())))
}

/// Derives a child seed from a parent seed and an index.
pub fn derive_indexed(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn named_rng(seed: u64, name: &str) -> Rng {
    rng_from(derive_seed(seed, name))
}

/// Rounds `x` up or down at random so that the expectation equals `x`.
pub fn stochastic_round<R: rand::Rng + ?Sized>(x: f64, rng: &mut R) -> usize {
    let base = x.floor();
    let frac = x - base;
    let extra = if rng.random::<f64>() < frac { 1.0 } else { 0.0 };
    (base + extra).max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_name_and_are_stable() {
        assert_eq!(derive_seed(7, "augment"), derive_seed(7, "augment"));
        assert_ne!(derive_seed(7, "augment"), derive_seed(7, "filter"));
        assert_ne!(derive_seed(7, "augment"), derive_seed(8, "augment"));
        assert_ne!(derive_indexed(7, 0), derive_indexed(7, 1));
    }

    #[test]
    fn stochastic_round_is_unbiased() {
        let mut rng = rng_from(1);
        let n = 20_000;
        let total: usize = (0..n).map(|_| stochastic_round(1.3, &mut rng)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 1.3).abs() < 0.02, "{mean}");
    }
}
