//! Seed derivation helpers.
//!
//! Every random stream in the crate is derived from the single run seed plus
//! a short list of stream keys (client id, round, target index, ...), so
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash a seed together with stream keys into a new 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k)))
}

/// ChaCha stream keyed by `(seed, keys)`.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Counter-based uniform draw in `[0, 1)`, a pure function of its arguments.
pub fn counter_uniform(seed: u64, keys: &[u64], counter: u64) -> f64 {
    let bits = mix64(derive_seed(seed, keys) ^ mix64(counter.wrapping_add(1)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
