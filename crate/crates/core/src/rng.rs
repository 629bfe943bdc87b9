//! Seeded random streams.
//!
//! Every source of randomness in a run flows from one root seed through
//! named substreams (dataset, init_s1, init_s2, init_g, latents, attacks, ...)
//! so that swapping two stream names swaps exactly the randomness they feed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic per-purpose RNG derived from a root seed and a stream name.
///
/// The derivation is FNV-1a over the seed bytes and the name, which is stable
/// across platforms and releases.
pub fn substream(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in root_seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Standard normal draw via Box-Muller.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let mut u1: f64 = rng.gen();
    while u1 <= f64::MIN_POSITIVE {
        u1 = rng.gen();
    }
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
