//! Algorithms behind the floodsight disaster-response pipeline.
//!
//! The crate is `no_std` compatible (it needs `alloc`). Everything here is a
//! pure function over in-memory values: raster tiling and alignment, the
//! single- and dual-encoder U-Nets with their hand-written backward passes,
//! losses and the training loop, pixel metrics, the damage cost model and
//! USNG geodesy. File formats and the command line live in the `floodsight`
//! crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod crs;
pub mod error;
pub mod financial;
pub mod flood;
pub mod geom;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod training;
pub mod usng;

pub use error::{Error, Result};
pub use mask::{ClassMask, DamageLevel, DamageMask};
pub use raster::{BBox, ChannelStats, GeoRaster, GeoTransform, TileSet};
