//! Seeded random streams. Each purpose gets its own ChaCha stream derived
//! from the experiment seed, so consuming randomness in one stage never
//! shifts another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    World = 1,
    Data = 2,
    Init = 3,
    Pretrain = 4,
    Unlearn = 5,
    Meta = 6,
    Attack = 7,
    Eval = 8,
    Sampler = 9,
    Probe = 10,
}

pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Sub-seed for the `index`-th job of a stream (per-seed replicas etc.).
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    // splitmix64 over the mixed inputs
    let mut z = seed ^ ((stream as u64) << 56) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
