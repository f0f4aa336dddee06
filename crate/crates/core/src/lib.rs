//! Pure core of a cascaded detector–verifier engine.
//!
//! Everything here is deterministic arithmetic over in-memory values and
//! builds without `std` (only `alloc` is required): box geometry and
//! matching, the prompt/response grammar, the adaptive threshold controller,
//! per-frame consensus, the asymmetric detection reward, a desk-scale GRPO
//! trainer, calibration utilities and dataset metrics.
//!
//! IO, backends, worker pools and the command line live in the `cascadet`
//! crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod calibration;
pub mod cascade;
mod error;
pub mod geometry;
pub mod grpo;
mod math;
pub mod metrics;
pub mod protocol;
pub mod quality;
pub mod rewards;

pub use error::{Error, Result};
