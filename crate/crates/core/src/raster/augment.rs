use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeoRaster, RGB_CHANNELS};
use crate::error::{invalid, Result};
use crate::mask::ClassMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Random multiples of 90 degrees.
    pub rotate90: bool,
    /// Arbitrary angles in `[-max_rotation_deg, max_rotation_deg]`, applied
    /// after the quarter turn. Masks use nearest-neighbour resampling.
    pub arbitrary_rotation: bool,
    pub max_rotation_deg: f64,
    /// Additive shift drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Contrast gain drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotate90: true, arbitrary_rotation: false, max_rotation_deg: 15.0, brightness: 0.1, contrast: 0.1 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { rotate90: false, arbitrary_rotation: false, max_rotation_deg: 0.0, brightness: 0.0, contrast: 0.0 }
    }
}

/// One concrete set of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub quarter_turns: u8,
    pub angle_deg: f64,
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { quarter_turns: 0, angle_deg: 0.0, brightness: 0.0, contrast: 1.0 };

    pub fn sample(seed: u64, params: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quarter_turns = if params.rotate90 { rng.random_range(0..4u8) } else { 0 };
        let angle_deg = if params.arbitrary_rotation && params.max_rotation_deg > 0.0 {
            rng.random_range(-params.max_rotation_deg..=params.max_rotation_deg)
        } else {
            0.0
        };
        let brightness =
            if params.brightness > 0.0 { rng.random_range(-params.brightness..=params.brightness) } else { 0.0 };
        let contrast = if params.contrast > 0.0 {
            rng.random_range(1.0 - params.contrast..=1.0 + params.contrast)
        } else {
            1.0
        };
        Self { quarter_turns, angle_deg, brightness, contrast }
    }

    /// Apply to an image/mask pair. Geometry moves both identically;
    /// photometric changes touch only the R, G and B channels of the image.
    pub fn apply(&self, tile: &GeoRaster, mask: &ClassMask) -> Result<(GeoRaster, ClassMask)> {
        if tile.width() != mask.width() || tile.height() != mask.height() {
            return Err(invalid!(
                "image is {}x{} but mask is {}x{}",
                tile.height(),
                tile.width(),
                mask.height(),
                mask.width()
            ));
        }
        let mut img = tile.clone();
        let mut m = mask.clone();
        for _ in 0..self.quarter_turns % 4 {
            img = rotate90_raster(&img)?;
            m = rotate90_mask(&m)?;
        }
        if self.angle_deg != 0.0 {
            img = rotate_raster(&img, self.angle_deg)?;
            m = rotate_mask(&m, self.angle_deg)?;
        }
        if self.brightness != 0.0 || self.contrast != 1.0 {
            for name in RGB_CHANNELS {
                if let Some(c) = img.channel_index(name) {
                    let ch = img.channel_mut(c);
                    let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64;
                    let mean = mean as f32;
                    for v in ch {
                        *v = (*v - mean) * self.contrast + mean + self.brightness;
                    }
                }
            }
        }
        Ok((img, m))
    }
}

/// Draw augmentation parameters from `seed` and apply them to the pair.
pub fn augment(
    tile: &GeoRaster,
    mask: &ClassMask,
    seed: u64,
    params: &AugmentConfig,
) -> Result<(GeoRaster, ClassMask)> {
    AugmentDraw::sample(seed, params).apply(tile, mask)
}

// Counter-clockwise quarter turn: new(x, y) = old(w - 1 - y, x).
fn rotate90_raster(r: &GeoRaster) -> Result<GeoRaster> {
    let (w, h) = (r.width(), r.height());
    let (nw, nh) = (h, w);
    let mut px = vec![0.0f32; r.pixels().len()];
    for c in 0..r.channels() {
        let src = r.channel(c);
        let dst = &mut px[c * nw * nh..(c + 1) * nw * nh];
        for y in 0..nh {
            for x in 0..nw {
                dst[y * nw + x] = src[x * w + (w - 1 - y)];
            }
        }
    }
    GeoRaster::new(nw, nh, px, r.geotransform, r.crs.clone(), r.channel_names().to_vec())
}

fn rotate90_mask(m: &ClassMask) -> Result<ClassMask> {
    let (w, h) = (m.width(), m.height());
    let (nw, nh) = (h, w);
    let mut out = vec![0u8; w * h];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = m.data()[x * w + (w - 1 - y)];
        }
    }
    Ok(ClassMask::new(nw, nh, out)?.with_georef(m.georef.clone()))
}

/// Source coordinate (continuous, pixel-center based) for output pixel `(x, y)`.
fn inverse_rotate(x: usize, y: usize, w: usize, h: usize, cos: f64, sin: f64) -> (f64, f64) {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    (cos * dx + sin * dy + cx - 0.5, -sin * dx + cos * dy + cy - 0.5)
}

fn rotate_raster(r: &GeoRaster, angle_deg: f64) -> Result<GeoRaster> {
    let (w, h) = (r.width(), r.height());
    let a = angle_deg.to_radians();
    let (cos, sin) = (libm::cos(a), libm::sin(a));
    let mut out = r.clone();
    for c in 0..r.channels() {
        let src = r.channel(c);
        let at = |x: isize, y: isize| -> f32 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0.0
            } else {
                src[y as usize * w + x as usize]
            }
        };
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = inverse_rotate(x, y, w, h, cos, sin);
                let (x0, y0) = (libm::floor(u), libm::floor(v));
                let (fx, fy) = ((u - x0) as f32, (v - y0) as f32);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                dst[y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

fn rotate_mask(m: &ClassMask, angle_deg: f64) -> Result<ClassMask> {
    let (w, h) = (m.width(), m.height());
    let a = angle_deg.to_radians();
    let (cos, sin) = (libm::cos(a), libm::sin(a));
    let mut out = m.clone();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = inverse_rotate(x, y, w, h, cos, sin);
            let (xi, yi) = (libm::floor(u + 0.5) as isize, libm::floor(v + 0.5) as isize);
            let v = if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                0
            } else {
                m.get(xi as usize, yi as usize)
            };
            out.set(x, y, v);
        }
    }
    Ok(out)
}
