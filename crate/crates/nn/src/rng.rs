//! Explicit, splittable seeding. Nothing in the workspace touches a global RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a path of tags.
///
/// Children with different tag paths are statistically independent, and the
/// result depends only on `(seed, tags)`, never on evaluation order.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x5851_F42D))))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec<E: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<E> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            E::c(x)
        })
        .collect()
}
