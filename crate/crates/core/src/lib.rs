//! Track-before-detect for passive sonar bearing tracking.

mod error;
mod fft;

pub mod array;
pub mod config;
pub mod detect;
pub mod eval;
pub mod likelihood;
pub mod noise;
pub mod pipeline;
pub mod seed;
pub mod sim;
pub mod stats;
pub mod tkbd;

pub use error::{Error, Result};
