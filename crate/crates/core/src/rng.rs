//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of a base seed plus a path of integer keys (outer replicate, inner
//! replicate, purpose, ...). Streams are independent of evaluation order, so
//! parallel and serial runs see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` at the given key path.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &k in path {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
