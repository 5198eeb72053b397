//! Seed plumbing. Every random draw in the crate comes from a ChaCha8 stream
//! whose seed is derived from a named base seed, so results do not depend on
//! thread scheduling or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags keep independent consumers of one base seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Mask = 2,
    Data = 3,
    Captions = 4,
    Shuffle = 5,
    Probe = 6,
    Vocab = 7,
}

pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream as u64)) ^ index)
}

pub fn rng_for(base: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}
