//! Deterministic, stateless RNG derivation.
//!
//! Every randomized stage derives its generator from `(seed, label, indices)`
//! instead of consuming a shared stateful stream. Resuming a run at step `s`
//! therefore reproduces the exact trace of an uninterrupted run, and
//! per-sample work can fan out to parallel workers without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fold(acc: u64, v: u64) -> u64 {
    splitmix64(acc ^ v.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Derive a generator from a base seed, a stage label, and indices.
pub fn derive(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut acc = splitmix64(seed);
    for b in label.as_bytes() {
        acc = fold(acc, *b as u64);
    }
    for &i in indices {
        acc = fold(acc, i);
    }
    ChaCha8Rng::seed_from_u64(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        let mut a = derive(7, "batch", &[3]);
        let mut b = derive(7, "batch", &[3]);
        let mut c = derive(7, "proto", &[3]);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(a.next_u64(), c.next_u64());
    }
}
