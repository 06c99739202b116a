//! Deterministic random streams derived from one master seed.
//!
//! Every Monte-Carlo run and every purpose within a run gets its own ChaCha
//! stream: the key comes from the master seed and the 64-bit stream id is
//! `run * STREAMS_PER_RUN + purpose`. Streams never overlap, so adding runs or
//! purposes leaves the existing ones untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAMS_PER_RUN: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Ambient noise and signal of a simulated dataset.
    Data = 0,
    /// Particle filter (motion, births, resampling).
    Filter = 1,
    /// Target-free datasets used for prior calibration.
    Calibration = 2,
}

pub fn stream(master: u64, run: u64, purpose: Purpose) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(run.wrapping_mul(STREAMS_PER_RUN).wrapping_add(purpose as u64));
    rng
}
