//! Quality-aware detection cascade: dataset ingestion, replay and HTTP
//! backends, the frame pipeline, reward scoring, toy policy training and
//! report emission. The numeric core lives in `cascadet-core`.

#![forbid(unsafe_code)]

pub mod backends;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod http;
pub mod output;
pub mod pipeline;
pub mod stub;

pub use error::{Error, Result};
