//! Learned hierarchical beam alignment for mmWave links.
//!
//! The crate covers the whole pipeline: geometric channel synthesis and the
//! BFCH dataset format ([`channel`]), steering/DFT/wide-beam codebooks
//! ([`codebook`]), noisy probing sweeps ([`sweep`]), ground-truth labels and
//! sine-space clustering ([`labels`]), a small gradient engine ([`neural`]),
//! the two-tier probing networks ([`hban`]), classical and learned baselines
//! ([`baselines`]) and the experiment driver ([`harness`]).
//!
//! Beam and group indices are 0-based throughout.

pub mod baselines;
pub mod channel;
pub mod codebook;
pub mod harness;
pub mod hban;
pub mod labels;
pub mod neural;
pub mod rng;
pub mod sweep;

mod error;

pub use error::{Error, Result};
