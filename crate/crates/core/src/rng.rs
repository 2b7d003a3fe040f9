//! Seeding convention.
//!
//! Every random consumer gets its own ChaCha20 stream keyed by a 64-bit seed
//! and a fixed [`Stream`] id, so data simulation and posterior sampling for
//! one replicate never share random numbers, and replicate `r` of a study
//! with base seed `s` always uses seed `s + r` regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Loadings = 1,
    Data = 2,
    Sampler = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn replicate_seed(base_seed: u64, replicate: usize) -> u64 {
    base_seed.wrapping_add(replicate as u64)
}
