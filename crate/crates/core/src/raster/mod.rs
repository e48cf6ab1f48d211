//! Georeferenced multi-channel rasters and the operations that prepare them
//! for the networks: tiling, HAND alignment, normalization and augmentation.

mod align;
mod augment;
mod normalize;
mod tiling;

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use align::{align_and_stack_hand, Resampling};
pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use normalize::{compute_stats, denormalize, normalize, ChannelStat, ChannelStats};
pub use tiling::{reassemble, reassemble_mask, tile_raster, TileSet};

pub const HAND_CHANNEL: &str = "HAND";
pub const RGB_CHANNELS: [&str; 3] = ["R", "G", "B"];

/// North-up affine pixel-to-CRS mapping. Rotation terms are always zero.
///
/// Pixel `(col, row)` refers to the upper-left corner of that pixel; the
/// center of pixel `(i, j)` is at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64) -> Result<Self> {
        let gt = Self { origin_x, origin_y, pixel_size_x, pixel_size_y };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size_x > 0.0) || !self.pixel_size_x.is_finite() {
            return Err(invalid!("pixel_size_x must be positive, got {}", self.pixel_size_x));
        }
        if self.pixel_size_y == 0.0 || !self.pixel_size_y.is_finite() {
            return Err(invalid!("pixel_size_y must be non-zero, got {}", self.pixel_size_y));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(invalid!("geotransform origin must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn geo_of_pixel(&self, col: f64, row: f64) -> (f64, f64) {
        (self.origin_x + col * self.pixel_size_x, self.origin_y + row * self.pixel_size_y)
    }

    #[inline]
    pub fn pixel_of_geo(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) / self.pixel_size_x, (y - self.origin_y) / self.pixel_size_y)
    }

    /// Transform of the sub-grid whose upper-left pixel is `(col, row)`.
    pub fn offset(&self, col: usize, row: usize) -> GeoTransform {
        let (x, y) = self.geo_of_pixel(col as f64, row as f64);
        GeoTransform { origin_x: x, origin_y: y, ..*self }
    }

    pub fn extent(&self, width: usize, height: usize) -> BBox {
        let (x0, y0) = self.geo_of_pixel(0.0, 0.0);
        let (x1, y1) = self.geo_of_pixel(width as f64, height as f64);
        BBox::from_corners(x0, y0, x1, y1)
    }
}

/// Axis-aligned box in CRS units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { min_x: x0.min(x1), min_y: y0.min(y1), max_x: x0.max(x1), max_y: y0.max(y1) }
    }

    pub fn empty() -> Self {
        Self {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }

    pub fn expand(&mut self, x: f64, y: f64) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    /// True when the interiors overlap.
    pub fn overlaps(&self, other: &BBox) -> bool {
        self.min_x < other.max_x
            && other.min_x < self.max_x
            && self.min_y < other.max_y
            && other.min_y < self.max_y
    }
}

/// Multi-channel pixel grid with an affine georeference.
///
/// Pixels are stored band-sequential: channel `c`, row `y`, column `x` lives
/// at `c * height * width + y * width + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoRaster {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
    pub geotransform: GeoTransform,
    pub crs: String,
    channel_names: Vec<String>,
}

impl GeoRaster {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f32>,
        geotransform: GeoTransform,
        crs: impl Into<String>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let channels = channel_names.len();
        if width == 0 || height == 0 || channels == 0 {
            return Err(invalid!(
                "raster must have H, W, C >= 1, got {height}x{width}x{channels}"
            ));
        }
        if pixels.len() != width * height * channels {
            return Err(invalid!(
                "raster buffer has {} values, expected {}",
                pixels.len(),
                width * height * channels
            ));
        }
        geotransform.validate()?;
        Ok(Self { width, height, channels, pixels, geotransform, crs: crs.into(), channel_names })
    }

    /// Raster filled with `value` on every channel.
    pub fn filled(
        width: usize,
        height: usize,
        channel_names: &[&str],
        value: f32,
        geotransform: GeoTransform,
        crs: &str,
    ) -> Result<Self> {
        let names = channel_names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::new(width, height, vec![value; width * height * names.len()], geotransform, crs, names)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.pixels[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn extent(&self) -> BBox {
        self.geotransform.extent(self.width, self.height)
    }

    pub fn same_grid(&self, other: &GeoRaster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.geotransform == other.geotransform
            && self.crs == other.crs
    }

    /// Interleaved `H x W x C` copy of the pixels.
    pub fn to_interleaved(&self) -> Vec<f32> {
        let n = self.plane_len();
        let mut out = Vec::with_capacity(self.pixels.len());
        for i in 0..n {
            for c in 0..self.channels {
                out.push(self.pixels[c * n + i]);
            }
        }
        out
    }

    pub fn from_interleaved(
        width: usize,
        height: usize,
        interleaved: &[f32],
        geotransform: GeoTransform,
        crs: impl Into<String>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 || interleaved.len() != width * height * c {
            return Err(invalid!("interleaved buffer does not match {height}x{width}x{c}"));
        }
        let n = width * height;
        let mut planar = vec![0.0f32; interleaved.len()];
        for i in 0..n {
            for k in 0..c {
                planar[k * n + i] = interleaved[i * c + k];
            }
        }
        Self::new(width, height, planar, geotransform, crs, channel_names)
    }

    /// Copy the named channels into a new raster, in the order given.
    pub fn select_channels(&self, names: &[&str]) -> Result<GeoRaster> {
        let mut pixels = Vec::with_capacity(names.len() * self.plane_len());
        for name in names {
            let c = self
                .channel_index(name)
                .ok_or_else(|| invalid!("raster has no channel named {name}"))?;
            pixels.extend_from_slice(self.channel(c));
        }
        GeoRaster::new(
            self.width,
            self.height,
            pixels,
            self.geotransform,
            self.crs.clone(),
            names.iter().map(|s| s.to_string()).collect(),
        )
    }
}

#[cfg(test)]
pub(crate) fn rgb_names() -> Vec<String> {
    RGB_CHANNELS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn origin_maps_to_pixel_zero() {
        let gt = GeoTransform::new(500_000.0, 3_300_000.0, 0.5, -0.5).unwrap();
        assert_eq!(gt.geo_of_pixel(0.0, 0.0), (500_000.0, 3_300_000.0));
    }

    #[test]
    fn invalid_pixel_sizes_rejected() {
        assert!(GeoTransform::new(0.0, 0.0, 0.0, -1.0).is_err());
        assert!(GeoTransform::new(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(GeoTransform::new(0.0, 0.0, -1.0, -1.0).is_err());
    }

    #[test]
    fn channel_names_must_match_buffer() {
        let gt = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        assert!(GeoRaster::new(2, 2, vec![0.0; 8], gt, "EPSG:4326", rgb_names()).is_err());
        assert!(GeoRaster::new(2, 2, vec![0.0; 12], gt, "EPSG:4326", rgb_names()).is_ok());
    }

    proptest! {
        // Origins are drawn in pixel units: a stored f64 coordinate x cannot
        // resolve finer than ulp(x) / pixel_size pixels, so the 1e-9 bound
        // holds while |x| / pixel_size stays below a few million.
        #[test]
        fn pixel_geo_round_trip_projected(
            ox in -1.0e6f64..1.0e6, oy in -1.0e6f64..1.0e6,
            sx in 0.1f64..100.0, sy in 0.1f64..100.0,
            col in 0.0f64..20_000.0, row in 0.0f64..20_000.0,
        ) {
            let gt = GeoTransform::new(ox * sx, oy * sy, sx, -sy).unwrap();
            let (x, y) = gt.geo_of_pixel(col, row);
            let (c2, r2) = gt.pixel_of_geo(x, y);
            prop_assert!((c2 - col).abs() < 1e-9);
            prop_assert!((r2 - row).abs() < 1e-9);
        }

        #[test]
        fn pixel_geo_round_trip_geographic(
            lon in -180.0f64..180.0, lat in -80.0f64..84.0,
            sx in 1.0e-6f64..0.1, sy in 1.0e-6f64..0.1,
            col in 0.0f64..20_000.0, row in 0.0f64..20_000.0,
        ) {
            // snap the origin to a whole number of pixels, capped at 1e6 pixels
            let ox = (lon / sx).clamp(-1.0e6, 1.0e6).round() * sx;
            let oy = (lat / sy).clamp(-1.0e6, 1.0e6).round() * sy;
            let gt = GeoTransform::new(ox, oy, sx, -sy).unwrap();
            let (x, y) = gt.geo_of_pixel(col, row);
            let (c2, r2) = gt.pixel_of_geo(x, y);
            prop_assert!((c2 - col).abs() < 1e-9);
            prop_assert!((r2 - row).abs() < 1e-9);
        }
    }
}
