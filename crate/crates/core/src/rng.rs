//! Named, stateless random streams.
//!
//! Every random draw in a run comes from a stream identified by the run seed,
//! a stream name and a list of integer coordinates (slice, round, client, ...).
//! Streams are derived by hashing, so no generator state needs to be carried
//! between components, checkpointed, or shared across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed for `name` at coordinates `coords`.
pub fn derive_seed(seed: u64, name: &str, coords: &[u64]) -> u64 {
    // FNV-1a over the name, then splitmix chaining over the coordinates.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut acc = splitmix(seed ^ splitmix(h));
    for &c in coords {
        acc = splitmix(acc ^ splitmix(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    acc
}

/// Open the stream `name` at `coords`.
pub fn stream(seed: u64, name: &str, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, coords))
}
