//! Seed derivation and sampling helpers. Everything that draws randomness in
//! this crate goes through a ChaCha stream seeded from values derived here, so
//! any artifact is a pure function of (config, seed).

use rand_chacha::rand_core::{Rng as RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the given byte chunks. Stable across platforms and runs.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        // Chunk delimiter so ("ab","c") and ("a","bc") differ.
        h ^= 0xff;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    stable_hash64(&[&master.to_le_bytes(), label.as_bytes()])
}

pub fn derive_seed_for(master: u64, label: &str, id: &str) -> u64 {
    stable_hash64(&[&master.to_le_bytes(), label.as_bytes(), id.as_bytes()])
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in [0, 1).
pub fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn uniform_in<R: RngCore>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

pub fn uniform_usize<R: RngCore>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// Standard normal via Box-Muller; one draw per call, no cached spare.
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = 1.0 - uniform01(rng); // (0, 1]
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates shuffle driven by the caller's stream.
pub fn shuffle<R: RngCore, T>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        items.swap(i, j);
    }
}

/// Deterministic held-out split: the floor(n * frac) ids with the largest
/// id hashes form the validation set. Exact count, order independent.
pub fn validation_ids<'a>(ids: impl Iterator<Item = &'a str>, frac: f64) -> Vec<String> {
    let mut keyed: Vec<(u64, String)> = ids
        .map(|id| (stable_hash64(&[b"val-split", id.as_bytes()]), id.to_string()))
        .collect();
    let take = (keyed.len() as f64 * frac).floor() as usize;
    keyed.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| b.1.cmp(&a.1)));
    keyed.truncate(take);
    keyed.into_iter().map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_chunk_sensitive() {
        assert_eq!(
            stable_hash64(&[b"abc"]),
            stable_hash64(&[b"abc"]),
            "same input same hash"
        );
        assert_ne!(stable_hash64(&[b"ab", b"c"]), stable_hash64(&[b"a", b"bc"]));
    }

    #[test]
    fn validation_split_is_exact_tenth() {
        let ids: Vec<String> = (0..500).map(|i| format!("utt-{i:04}")).collect();
        let val = validation_ids(ids.iter().map(|s| s.as_str()), 0.1);
        assert_eq!(val.len(), 50);
        // Same split regardless of input order.
        let mut rev: Vec<&str> = ids.iter().rev().map(|s| s.as_str()).collect();
        let val2 = validation_ids(rev.drain(..), 0.1);
        assert_eq!(val, val2);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = rng_from(11);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
