//! File formats and the batch pipeline around `floodsight-core`.

pub mod atomic;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod geo;
pub mod geotiff;
pub mod mask_png;

/// Marks an error as bad input (exit status 2) rather than a runtime failure.
#[derive(Debug, Clone, Copy, thiserror::Error)]
#[error("invalid input")]
pub struct Invalid;
