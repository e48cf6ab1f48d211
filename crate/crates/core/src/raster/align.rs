use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{GeoRaster, HAND_CHANNEL, RGB_CHANNELS};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Nearest,
    #[default]
    Bilinear,
}

/// Resample a single-band HAND raster onto the RGB pixel grid and append it
/// as a fourth channel. HAND samples outside its own extent are clamped to
/// the nearest edge pixel.
pub fn align_and_stack_hand(
    rgb: &GeoRaster,
    hand: &GeoRaster,
    resampling: Resampling,
) -> Result<GeoRaster> {
    if rgb.channels() != 3 {
        return Err(invalid!("expected a 3-channel RGB raster, got {}", rgb.channels()));
    }
    if hand.channels() != 1 {
        return Err(invalid!("expected a 1-channel HAND raster, got {}", hand.channels()));
    }
    if rgb.crs.trim().is_empty() || hand.crs.trim().is_empty() {
        return Err(invalid!("both rasters need a CRS"));
    }
    if rgb.crs != hand.crs {
        return Err(Error::Alignment(alloc::format!(
            "CRS mismatch: imagery {} vs HAND {}",
            rgb.crs,
            hand.crs
        )));
    }
    if !rgb.extent().overlaps(&hand.extent()) {
        return Err(Error::Alignment("imagery and HAND extents are disjoint".to_string()));
    }

    let (w, h) = (rgb.width(), rgb.height());
    let (hw, hh) = (hand.width() as isize, hand.height() as isize);
    let src = hand.channel(0);
    let sample = |ix: isize, iy: isize| -> f32 {
        let x = ix.clamp(0, hw - 1) as usize;
        let y = iy.clamp(0, hh - 1) as usize;
        src[y * hand.width() + x]
    };

    let mut out = Vec::with_capacity(w * h * 4);
    out.extend_from_slice(rgb.pixels());
    let identical_grid = hand.geotransform == rgb.geotransform && hand.width() == w && hand.height() == h;
    for row in 0..h {
        if identical_grid {
            out.extend_from_slice(&src[row * w..(row + 1) * w]);
            continue;
        }
        for col in 0..w {
            let (gx, gy) = rgb.geotransform.geo_of_pixel(col as f64 + 0.5, row as f64 + 0.5);
            let (u, v) = hand.geotransform.pixel_of_geo(gx, gy);
            // continuous coordinates relative to HAND pixel centers
            let (u, v) = (u - 0.5, v - 0.5);
            let value = match resampling {
                Resampling::Nearest => sample(round_half_up(u), round_half_up(v)),
                Resampling::Bilinear => {
                    let (x0, y0) = (libm::floor(u), libm::floor(v));
                    let (fx, fy) = ((u - x0) as f32, (v - y0) as f32);
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
                    let bottom = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
                    top * (1.0 - fy) + bottom * fy
                }
            };
            out.push(value);
        }
    }
    let mut names: Vec<_> = RGB_CHANNELS.iter().map(|s| s.to_string()).collect();
    names.push(HAND_CHANNEL.to_string());
    GeoRaster::new(w, h, out, rgb.geotransform, rgb.crs.clone(), names)
}

fn round_half_up(v: f64) -> isize {
    libm::floor(v + 0.5) as isize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{rgb_names, GeoTransform};
    use alloc::vec;

    fn rgb(w: usize, h: usize, gt: GeoTransform) -> GeoRaster {
        let px = (0..w * h * 3).map(|i| i as f32).collect();
        GeoRaster::new(w, h, px, gt, "EPSG:32615", rgb_names()).unwrap()
    }

    fn hand(w: usize, h: usize, gt: GeoTransform, px: Vec<f32>) -> GeoRaster {
        GeoRaster::new(w, h, px, gt, "EPSG:32615", vec![HAND_CHANNEL.to_string()]).unwrap()
    }

    #[test]
    fn identical_grid_is_bit_exact() {
        let gt = GeoTransform::new(1000.0, 2000.0, 1.0, -1.0).unwrap();
        let hpx: Vec<f32> = (0..16).map(|i| (i as f32).sqrt() * 1.37).collect();
        for mode in [Resampling::Nearest, Resampling::Bilinear] {
            let out = align_and_stack_hand(&rgb(4, 4, gt), &hand(4, 4, gt, hpx.clone()), mode).unwrap();
            assert_eq!(out.channel(3), &hpx[..]);
            assert_eq!(out.geotransform, gt);
            assert_eq!(out.channel_names(), &["R", "G", "B", "HAND"]);
        }
    }

    #[test]
    fn coarse_hand_nearest_replicates_blocks() {
        let fine = GeoTransform::new(0.0, 4.0, 1.0, -1.0).unwrap();
        let coarse = GeoTransform::new(0.0, 4.0, 2.0, -2.0).unwrap();
        let out = align_and_stack_hand(
            &rgb(4, 4, fine),
            &hand(2, 2, coarse, vec![1.0, 2.0, 3.0, 4.0]),
            Resampling::Nearest,
        )
        .unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(out.channel(3), &expected[..]);
    }

    #[test]
    fn bilinear_interpolates_between_centers() {
        let fine = GeoTransform::new(0.0, 1.0, 1.0, -1.0).unwrap();
        let coarse = GeoTransform::new(0.0, 1.0, 2.0, -1.0).unwrap();
        // HAND centers at x = 1 and x = 3; RGB centers at 0.5, 1.5, 2.5, 3.5
        let out =
            align_and_stack_hand(&rgb(4, 1, fine), &hand(2, 1, coarse, vec![0.0, 4.0]), Resampling::Bilinear)
                .unwrap();
        assert_eq!(out.channel(3), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn disjoint_extents_fail() {
        let a = GeoTransform::new(0.0, 10.0, 1.0, -1.0).unwrap();
        let b = GeoTransform::new(100.0, 10.0, 1.0, -1.0).unwrap();
        let err = align_and_stack_hand(&rgb(4, 4, a), &hand(4, 4, b, vec![0.0; 16]), Resampling::Nearest);
        assert!(matches!(err, Err(Error::Alignment(_))));
    }

    #[test]
    fn missing_crs_is_invalid_input() {
        let gt = GeoTransform::new(0.0, 10.0, 1.0, -1.0).unwrap();
        let mut h = hand(4, 4, gt, vec![0.0; 16]);
        h.crs.clear();
        let err = align_and_stack_hand(&rgb(4, 4, gt), &h, Resampling::Nearest);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
