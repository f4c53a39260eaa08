//! Deterministic RNG streams.
//!
//! Every source of randomness in the simulator is a named sub-stream of one
//! master seed, so that runs are reproducible end-to-end and per-client
//! streams are independent of what happens to other clients.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Platform-independent mixer (splitmix64 finalizer).
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a, then mixed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

/// Derives a 64-bit sub-seed from a master seed, a stream tag and indices.
pub fn sub_seed(master: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut state = mix(master ^ hash_tag(tag));
    for (i, p) in parts.iter().enumerate() {
        state = mix(state ^ p.wrapping_add(mix(i as u64 + 1)));
    }
    state
}

/// A ChaCha stream for `(master, tag, parts)`, independent across tags and
/// indices.
pub fn stream(master: u64, tag: &str, parts: &[u64]) -> ChaCha12Rng {
    let s0 = sub_seed(master, tag, parts);
    let mut seed = [0u8; 32];
    let mut state = s0;
    for chunk in seed.chunks_mut(8) {
        state = mix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}
