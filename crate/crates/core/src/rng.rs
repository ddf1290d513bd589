//! Keyed random streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream whose 256-bit
//! key is derived from `(seed, client, round, purpose)` with SplitMix64.
//! Streams never depend on scheduling, so results are identical for any
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Split = 2,
    Partition = 3,
    TaskMask = 4,
    Topology = 5,
    Shuffle = 6,
    Dropout = 7,
    Synthetic = 8,
    Estimate = 9,
}

/// Sentinel client id for streams not tied to a client.
pub const GLOBAL: u64 = u64::MAX;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, client: u64, round: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    let mut acc = splitmix64(&mut state);
    for word in [client, round, purpose as u64] {
        state ^= word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc ^= splitmix64(&mut state);
    }
    for chunk in key.chunks_mut(8) {
        let v = splitmix64(&mut state) ^ acc;
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
