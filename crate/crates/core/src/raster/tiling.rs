use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BBox, GeoRaster};
use crate::error::{invalid, Result};
use crate::mask::ClassMask;

/// Fixed-size tiles cut from one raster, row-major over the tile grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSet {
    pub tiles: Vec<GeoRaster>,
    pub grid_shape: (usize, usize),
    pub tile_size: usize,
    pub source_width: usize,
    pub source_height: usize,
    pub source_extent: BBox,
    pub pad_value: f32,
}

impl TileSet {
    pub fn rows(&self) -> usize {
        self.grid_shape.0
    }

    pub fn cols(&self) -> usize {
        self.grid_shape.1
    }

    /// Pixel offset `(col, row)` of tile `index` within the source.
    pub fn tile_offset(&self, index: usize) -> (usize, usize) {
        let cols = self.cols();
        ((index % cols) * self.tile_size, (index / cols) * self.tile_size)
    }

    /// Same grid bookkeeping, new tile contents (e.g. per-tile predictions).
    pub fn with_tiles(&self, tiles: Vec<GeoRaster>) -> TileSet {
        TileSet { tiles, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> TileSet {
        TileSet {
            tiles: Vec::new(),
            grid_shape: self.grid_shape,
            tile_size: self.tile_size,
            source_width: self.source_width,
            source_height: self.source_height,
            source_extent: self.source_extent,
            pad_value: self.pad_value,
        }
    }
}

/// Cut `raster` into `tile_size x tile_size` tiles. Edge tiles are padded on
/// the bottom and right with `pad_value`.
pub fn tile_raster(raster: &GeoRaster, tile_size: usize, pad_value: f32) -> Result<TileSet> {
    if tile_size == 0 {
        return Err(invalid!("tile_size must be >= 1"));
    }
    if raster.pixels().is_empty() {
        return Err(invalid!("cannot tile an empty raster"));
    }
    let (w, h, c) = (raster.width(), raster.height(), raster.channels());
    let rows = h.div_ceil(tile_size);
    let cols = w.div_ceil(tile_size);
    let plane = tile_size * tile_size;
    let mut tiles = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let (x0, y0) = (tc * tile_size, tr * tile_size);
            let copy_w = tile_size.min(w - x0);
            let copy_h = tile_size.min(h - y0);
            let mut px = alloc::vec![pad_value; plane * c];
            for ch in 0..c {
                let src = raster.channel(ch);
                for y in 0..copy_h {
                    let s = (y0 + y) * w + x0;
                    let d = ch * plane + y * tile_size;
                    px[d..d + copy_w].copy_from_slice(&src[s..s + copy_w]);
                }
            }
            tiles.push(GeoRaster::new(
                tile_size,
                tile_size,
                px,
                raster.geotransform.offset(x0, y0),
                raster.crs.clone(),
                raster.channel_names().to_vec(),
            )?);
        }
    }
    Ok(TileSet {
        tiles,
        grid_shape: (rows, cols),
        tile_size,
        source_width: w,
        source_height: h,
        source_extent: raster.extent(),
        pad_value,
    })
}

/// Inverse of [`tile_raster`]: stitch the tiles and crop the padding.
pub fn reassemble(set: &TileSet) -> Result<GeoRaster> {
    let (rows, cols) = set.grid_shape;
    let t = set.tile_size;
    if set.tiles.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(invalid!(
            "tile set holds {} tiles for a {rows}x{cols} grid",
            set.tiles.len()
        ));
    }
    if rows != set.source_height.div_ceil(t) || cols != set.source_width.div_ceil(t) {
        return Err(invalid!("grid shape does not cover the source extent"));
    }
    let first = &set.tiles[0];
    let c = first.channels();
    for (i, tile) in set.tiles.iter().enumerate() {
        if tile.width() != t || tile.height() != t {
            return Err(invalid!(
                "tile {i} is {}x{}, expected {t}x{t}",
                tile.height(),
                tile.width()
            ));
        }
        if tile.channels() != c || tile.channel_names() != first.channel_names() {
            return Err(invalid!("tile {i} channels differ from tile 0"));
        }
    }
    let (w, h) = (set.source_width, set.source_height);
    let mut px = alloc::vec![0.0f32; w * h * c];
    for (i, tile) in set.tiles.iter().enumerate() {
        let (x0, y0) = set.tile_offset(i);
        let copy_w = t.min(w - x0);
        let copy_h = t.min(h - y0);
        for ch in 0..c {
            let src = tile.channel(ch);
            for y in 0..copy_h {
                let d = ch * w * h + (y0 + y) * w + x0;
                px[d..d + copy_w].copy_from_slice(&src[y * t..y * t + copy_w]);
            }
        }
    }
    GeoRaster::new(w, h, px, first.geotransform, first.crs.clone(), first.channel_names().to_vec())
}

/// Stitch per-tile label masks laid out like `set` and crop to the source size.
pub fn reassemble_mask(set: &TileSet, masks: &[ClassMask]) -> Result<ClassMask> {
    let t = set.tile_size;
    if masks.len() != set.rows() * set.cols() {
        return Err(invalid!("{} masks for {} tiles", masks.len(), set.rows() * set.cols()));
    }
    let (w, h) = (set.source_width, set.source_height);
    let mut out = alloc::vec![0u8; w * h];
    for (i, m) in masks.iter().enumerate() {
        if m.width() != t || m.height() != t {
            return Err(invalid!("mask {i} is {}x{}, expected {t}x{t}", m.height(), m.width()));
        }
        let (x0, y0) = set.tile_offset(i);
        let copy_w = t.min(w - x0);
        for y in 0..t.min(h - y0) {
            let d = (y0 + y) * w + x0;
            out[d..d + copy_w].copy_from_slice(&m.data()[y * t..y * t + copy_w]);
        }
    }
    let georef = set.tiles.first().map(|tile| crate::mask::GeoRef {
        transform: tile.geotransform,
        crs: tile.crs.clone(),
    });
    Ok(ClassMask::new(w, h, out)?.with_georef(georef))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize, c: usize) -> GeoRaster {
        let names = (0..c).map(|i| alloc::format!("b{i}")).collect();
        let px = (0..w * h * c).map(|i| i as f32 * 0.25).collect();
        let gt = GeoTransform::new(300_000.0, 3_200_000.0, 0.5, -0.5).unwrap();
        GeoRaster::new(w, h, px, gt, "EPSG:32615", names).unwrap()
    }

    #[test]
    fn full_noaa_size_tile_count() {
        // 9351 / 1024 rounds up to 10 in each direction
        assert_eq!(9351usize.div_ceil(1024), 10);
        let r = ramp(9351, 3, 1);
        let set = tile_raster(&r, 1024, 0.0).unwrap();
        assert_eq!(set.grid_shape, (1, 10));
    }

    #[test]
    fn exact_fit_is_single_unpadded_tile() {
        let r = ramp(64, 64, 3);
        let set = tile_raster(&r, 64, -1.0).unwrap();
        assert_eq!(set.tiles.len(), 1);
        assert_eq!(set.tiles[0].pixels(), r.pixels());
    }

    #[test]
    fn tall_raster_pads_bottom_rows() {
        // 2048 wide x 1000 tall: one row of two tiles, each padded by 24 rows
        let r = ramp(2048, 1000, 1);
        let set = tile_raster(&r, 1024, 7.0).unwrap();
        assert_eq!(set.grid_shape, (1, 2));
        for tile in &set.tiles {
            for y in 1000..1024 {
                assert!((0..1024).all(|x| tile.get(0, x, y) == 7.0));
            }
            assert_ne!(tile.get(0, 0, 999), 7.0);
        }
        assert_eq!(reassemble(&set).unwrap(), r);
    }

    #[test]
    fn tile_geotransform_follows_offset() {
        let r = ramp(10, 10, 1);
        let set = tile_raster(&r, 4, 0.0).unwrap();
        let t = &set.tiles[set.cols() + 2]; // row 1, col 2
        assert_eq!(t.geotransform.origin_x, 300_000.0 + 8.0 * 0.5);
        assert_eq!(t.geotransform.origin_y, 3_200_000.0 - 4.0 * 0.5);
        assert_eq!(t.get(0, 0, 0), r.get(0, 8, 4));
    }

    #[test]
    fn zero_tile_size_rejected() {
        assert!(tile_raster(&ramp(4, 4, 1), 0, 0.0).is_err());
    }

    #[test]
    fn inconsistent_tiles_rejected() {
        let r = ramp(8, 8, 1);
        let mut set = tile_raster(&r, 4, 0.0).unwrap();
        set.tiles[1] = ramp(3, 3, 1);
        assert!(reassemble(&set).is_err());
        set.tiles.pop();
        assert!(reassemble(&set).is_err());
    }

    #[test]
    fn single_tile_set_crops_to_source() {
        let gt = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let r = GeoRaster::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], gt, "EPSG:4326", vec!["x".to_string()])
            .unwrap();
        let set = tile_raster(&r, 4, 0.0).unwrap();
        assert_eq!(set.tiles.len(), 1);
        assert_eq!(reassemble(&set).unwrap(), r);
    }

    #[test]
    fn mask_reassembly_matches_source_grid() {
        let gt = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let r = GeoRaster::filled(5, 3, &["R", "G", "B"], 0.0, gt, "EPSG:4326").unwrap();
        let set = tile_raster(&r, 2, 0.0).unwrap();
        let masks: Vec<ClassMask> =
            (0..set.tiles.len()).map(|i| ClassMask::filled(2, 2, i as u8).unwrap()).collect();
        let m = reassemble_mask(&set, &masks).unwrap();
        assert_eq!((m.width(), m.height()), (5, 3));
        assert_eq!(m.get(4, 2), 5);
        assert_eq!(m.get(0, 0), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn tile_reassemble_round_trip(w in 1usize..70, h in 1usize..70, c in 1usize..4, t in 1usize..40) {
            let r = ramp(w, h, c);
            let set = tile_raster(&r, t, f32::NAN).unwrap();
            prop_assert_eq!(set.tiles.len(), w.div_ceil(t) * h.div_ceil(t));
            prop_assert_eq!(reassemble(&set).unwrap(), r);
        }
    }
}
