//! Flood extent from a segmentation mask and pixel-edge boundary tracing.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom::signed_area;
use crate::mask::ClassMask;
use crate::raster::{GeoRaster, GeoTransform};

/// Closed loop along pixel edges, in pixel-corner coordinates (y down).
///
/// Outer boundaries run clockwise on screen (positive shoelace area in
/// pixel coordinates), holes the other way, so the signed areas of all
/// loops of a region sum to its pixel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelLoop {
    /// Corner vertices with collinear runs merged; not repeated at the end.
    pub vertices: Vec<[u32; 2]>,
    /// Number of unit pixel edges along the loop.
    pub edge_count: usize,
}

impl PixelLoop {
    pub fn signed_area(&self) -> f64 {
        let pts: Vec<[f64; 2]> = self.vertices.iter().map(|v| [v[0] as f64, v[1] as f64]).collect();
        signed_area(&pts)
    }

    pub fn is_hole(&self) -> bool {
        self.signed_area() < 0.0
    }

    /// Closed vertex list (first vertex repeated) mapped through `gt`.
    pub fn to_geo(&self, gt: &GeoTransform) -> Vec<[f64; 2]> {
        self.vertices
            .iter()
            .chain(self.vertices.first())
            .map(|v| {
                let (x, y) = gt.geo_of_pixel(v[0] as f64, v[1] as f64);
                [x, y]
            })
            .collect()
    }
}

// east, south, west, north in pixel coordinates
const STEP: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
const NONE: u32 = u32::MAX;

/// Boundaries of the `true` region of a `w x h` grid. Each loop keeps the
/// region on its right; at diagonal contacts the trace turns right, so
/// diagonally touching pixels get separate loops.
pub fn trace_boundaries(inside: &[bool], w: usize, h: usize) -> Vec<PixelLoop> {
    assert_eq!(inside.len(), w * h, "grid size mismatch");
    let at = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && inside[y as usize * w + x as usize];
    let vw = w + 1;
    // per corner vertex, outgoing edge direction slots (at most two)
    let mut out = vec![[NONE; 2]; vw * (h + 1)];
    let mut n_edges = 0usize;
    let mut push = |out: &mut Vec<[u32; 2]>, x: usize, y: usize, d: u32| {
        let s = &mut out[y * vw + x];
        if s[0] == NONE {
            s[0] = d;
        } else {
            s[1] = d;
        }
        n_edges += 1;
    };
    for y in 0..h {
        for x in 0..w {
            if !inside[y * w + x] {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            if !at(xi, yi - 1) {
                push(&mut out, x, y, 0);
            }
            if !at(xi + 1, yi) {
                push(&mut out, x + 1, y, 1);
            }
            if !at(xi, yi + 1) {
                push(&mut out, x + 1, y + 1, 2);
            }
            if !at(xi - 1, yi) {
                push(&mut out, x, y + 1, 3);
            }
        }
    }
    let mut loops = Vec::new();
    let mut used = vec![[false; 2]; out.len()];
    for start in 0..out.len() {
        for slot in 0..2 {
            if out[start][slot] == NONE || used[start][slot] {
                continue;
            }
            let mut verts: Vec<[u32; 2]> = Vec::new();
            let (mut v, mut s) = (start, slot);
            let mut edges = 0usize;
            let mut prev_dir: Option<u32> = None;
            loop {
                used[v][s] = true;
                let d = out[v][s];
                if prev_dir != Some(d) {
                    verts.push([(v % vw) as u32, (v / vw) as u32]);
                }
                prev_dir = Some(d);
                edges += 1;
                let (dx, dy) = STEP[d as usize];
                let nx = (v % vw) as i64 + dx;
                let ny = (v / vw) as i64 + dy;
                v = ny as usize * vw + nx as usize;
                // prefer a right turn, then straight, then left
                let pick = [(d + 1) % 4, d, (d + 3) % 4]
                    .into_iter()
                    .find_map(|want| (0..2).find(|&k| out[v][k] == want));
                match pick {
                    Some(k) if (v, k) == (start, slot) => break,
                    Some(k) if !used[v][k] => s = k,
                    _ => unreachable!("edge graph is balanced"),
                }
            }
            // the start vertex is a corner unless the loop closed going straight
            if verts.len() > 1 && prev_dir == Some(out[start][slot]) {
                verts.remove(0);
            }
            loops.push(PixelLoop { vertices: verts, edge_count: edges });
        }
    }
    debug_assert_eq!(loops.iter().map(|l| l.edge_count).sum::<usize>(), n_edges);
    loops
}

/// Boundaries of a set of row-major pixel indices in a grid `width` wide,
/// in the grid's own corner coordinates.
pub fn trace_pixel_set(pixels: &[u32], width: usize) -> Vec<PixelLoop> {
    if pixels.is_empty() {
        return Vec::new();
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &i in pixels {
        let (x, y) = (i as usize % width, i as usize / width);
        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
    }
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut g = vec![false; w * h];
    for &i in pixels {
        g[(i as usize / width - y0) * w + i as usize % width - x0] = true;
    }
    let mut loops = trace_boundaries(&g, w, h);
    for l in &mut loops {
        for v in &mut l.vertices {
            v[0] += x0 as u32;
            v[1] += y0 as u32;
        }
    }
    loops
}

/// Water raster plus its flood lines.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodExtent {
    /// One channel named `water`, 1.0 for water pixels and 0.0 elsewhere.
    pub water: GeoRaster,
    pub boundaries: Vec<PixelLoop>,
}

impl FloodExtent {
    pub fn water_pixels(&self) -> usize {
        self.water.pixels().iter().filter(|&&v| v > 0.0).count()
    }

    /// Flood lines as closed polylines in map coordinates.
    pub fn lines(&self) -> Vec<Vec<[f64; 2]>> {
        self.boundaries.iter().map(|b| b.to_geo(&self.water.geotransform)).collect()
    }
}

pub fn extract_flood_extent(mask: &ClassMask, water_class: u8, transform: &GeoTransform, crs: &str) -> Result<FloodExtent> {
    let (w, h) = (mask.width(), mask.height());
    if w == 0 || h == 0 {
        return Err(invalid!("empty mask"));
    }
    let inside: Vec<bool> = mask.data().iter().map(|&v| v == water_class).collect();
    let pixels = inside.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let water = GeoRaster::new(w, h, pixels, *transform, crs, vec!["water".to_string()])?;
    Ok(FloodExtent { water, boundaries: trace_boundaries(&inside, w, h) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut g = vec![false; w * h];
        for &(x, y) in on {
            g[y * w + x] = true;
        }
        g
    }

    fn square(x0: usize, y0: usize, s: usize) -> Vec<(usize, usize)> {
        (y0..y0 + s).flat_map(|y| (x0..x0 + s).map(move |x| (x, y))).collect()
    }

    fn extent(w: usize, h: usize, on: &[(usize, usize)]) -> FloodExtent {
        let mut d = vec![0u8; w * h];
        for &(x, y) in on {
            d[y * w + x] = 1;
        }
        let m = ClassMask::new(w, h, d).unwrap();
        extract_flood_extent(&m, 1, &GeoTransform::new(500.0, 1000.0, 2.0, -2.0).unwrap(), "EPSG:32615").unwrap()
    }

    #[test]
    fn background_only() {
        assert!(extent(8, 8, &[]).boundaries.is_empty());
    }

    #[test]
    fn ten_by_ten_square() {
        let f = extent(20, 20, &square(3, 5, 10));
        assert_eq!(f.boundaries.len(), 1);
        let b = &f.boundaries[0];
        assert_eq!(b.edge_count, 40);
        assert_eq!(b.vertices, vec![[3, 5], [13, 5], [13, 15], [3, 15]]);
        assert_eq!(b.signed_area(), 100.0);
        let line = &f.lines()[0];
        assert_eq!(line.len(), 5);
        assert_eq!(line[0], line[4]);
        assert_eq!(line[0], [506.0, 990.0]);
        assert_eq!(f.water_pixels(), 100);
    }

    #[test]
    fn two_blobs_two_loops() {
        let mut on = square(0, 0, 3);
        on.extend(square(6, 6, 2));
        let f = extent(10, 10, &on);
        assert_eq!(f.boundaries.len(), 2);
        let areas: Vec<f64> = f.boundaries.iter().map(|b| b.signed_area()).collect();
        assert_eq!(areas, vec![9.0, 4.0]);
    }

    #[test]
    fn ring_with_hole() {
        let on: Vec<_> = square(0, 0, 5).into_iter().filter(|&(x, y)| !(1..4).contains(&x) || !(1..4).contains(&y)).collect();
        let loops = trace_boundaries(&grid(5, 5, &on), 5, 5);
        assert_eq!(loops.len(), 2);
        assert_eq!(loops.iter().filter(|l| l.is_hole()).count(), 1);
        assert_eq!(loops.iter().map(|l| l.signed_area()).sum::<f64>(), 16.0);
    }

    #[test]
    fn pixel_set_offsets() {
        let px: Vec<u32> = square(4, 2, 3).into_iter().map(|(x, y)| (y * 10 + x) as u32).collect();
        let loops = trace_pixel_set(&px, 10);
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].vertices, vec![[4, 2], [7, 2], [7, 5], [4, 5]]);
        assert!(trace_pixel_set(&[], 10).is_empty());
    }

    #[test]
    fn diagonal_contact_splits() {
        let loops = trace_boundaries(&grid(2, 2, &[(0, 0), (1, 1)]), 2, 2);
        assert_eq!(loops.len(), 2);
        assert!(loops.iter().all(|l| l.edge_count == 4 && l.vertices.len() == 4));
    }

    proptest! {
        #[test]
        fn loops_close_and_cover_area(w in 1usize..12, h in 1usize..12, seed: u64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.5)).collect();
            let loops = trace_boundaries(&g, w, h);
            let area: f64 = loops.iter().map(|l| l.signed_area()).sum();
            prop_assert_eq!(area as usize, g.iter().filter(|&&b| b).count());
            for l in &loops {
                // consecutive vertices (cyclically) differ along one axis only
                let n = l.vertices.len();
                prop_assert!(n >= 4);
                let mut perim = 0u64;
                for i in 0..n {
                    let (a, b) = (l.vertices[i], l.vertices[(i + 1) % n]);
                    prop_assert!((a[0] == b[0]) != (a[1] == b[1]));
                    perim += (a[0].abs_diff(b[0]) + a[1].abs_diff(b[1])) as u64;
                }
                prop_assert_eq!(perim as usize, l.edge_count);
            }
        }
    }
}
