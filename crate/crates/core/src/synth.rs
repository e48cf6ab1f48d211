//! Deterministic synthetic scenes for training and end-to-end runs.
//!
//! Damage pairs: rectangular roofs on a textured ground field; the post image
//! repaints each roof according to its damage level. Recipes (fixed):
//! - no damage: unchanged,
//! - minor: about 30% of roof pixels darkened to 55% (speckle),
//! - major: a 2x2-block checkerboard of the roof erased to ground,
//! - destroyed: the whole roof erased to ground.
//!
//! Flood scenes: RGB with water, vegetation, roads and buildings, plus a
//! HAND surface at half resolution. Water lies where HAND is low; "wet
//! pavement" patches with water colouring (labelled road) lie where HAND is
//! high, so RGB alone cannot separate them.
//!
//! Every output is a pure function of `(config, index)`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crs::Crs;
use crate::error::{invalid, Result};
use crate::financial::{PricePerSqft, RegionIndex, ZhviTable, FEET_PER_METRE};
use crate::geom::Polygon;
use crate::mask::{ClassMask, DamageMask};
use crate::raster::{BBox, GeoRaster, GeoTransform, HAND_CHANNEL, RGB_CHANNELS};

pub const SYNTH_CRS: Crs = Crs::Utm { zone: 15, north: true };
/// Upper-left corner of scene 0 in UTM 15N metres.
pub const SYNTH_ORIGIN: (f64, f64) = (271_000.0, 3_295_000.0);
/// Scenes sit on a grid of this many columns, 100 m apart.
pub const SYNTH_GRID_COLUMNS: usize = 20;
pub const SYNTH_SPACING_M: f64 = 100.0;

const CLASS_WATER: u8 = 1;
const CLASS_VEGETATION: u8 = 2;
const CLASS_ROAD: u8 = 3;
const CLASS_BUILDING: u8 = 4;

// stream offsets, so damage and flood scenes never share random draws
const FLOOD_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaterBlobConfig {
    /// Blob count per scene, inclusive range.
    pub count: [usize; 2],
    /// Blob radius in pixels, inclusive range.
    pub radius: [usize; 2],
    /// Wet-pavement confuser count per scene, inclusive range.
    pub confusers: [usize; 2],
    /// Water stops above this HAND value (metres).
    pub max_hand: f64,
    /// Confusers only sit above this HAND value (metres).
    pub confuser_min_hand: f64,
}

impl Default for WaterBlobConfig {
    fn default() -> Self {
        Self { count: [1, 3], radius: [5, 10], confusers: [1, 3], max_hand: 3.0, confuser_min_hand: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_samples: usize,
    /// Buildings per image, inclusive range.
    pub n_buildings: [usize; 2],
    /// Roof edge length in pixels, inclusive range.
    pub building_size: [usize; 2],
    /// Fraction of images hit by the event; the others are all level 1.
    pub event_fraction: f64,
    /// Probabilities of levels 1-4 for buildings in hit images.
    pub damage_distribution: [f64; 4],
    pub water: WaterBlobConfig,
    /// Ground sample distance, feet per pixel.
    pub gsd_ft: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 64,
            n_samples: 200,
            n_buildings: [3, 6],
            building_size: [6, 14],
            event_fraction: 0.6,
            damage_distribution: [0.25, 0.25, 0.25, 0.25],
            water: WaterBlobConfig::default(),
            gsd_ft: 0.5 * FEET_PER_METRE,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 2 != 0 {
            return Err(invalid!("image_size must be even and at least 16, got {}", self.image_size));
        }
        let ordered = |r: [usize; 2]| r[0] <= r[1];
        if !ordered(self.n_buildings) || !ordered(self.building_size) || !ordered(self.water.count) || !ordered(self.water.radius) || !ordered(self.water.confusers) {
            return Err(invalid!("ranges must be [min, max] with min <= max"));
        }
        if self.building_size[0] < 2 || self.building_size[1] + 4 > self.image_size {
            return Err(invalid!("building_size {:?} does not fit {}-pixel images", self.building_size, self.image_size));
        }
        if self.water.radius[0] < 1 {
            return Err(invalid!("water blob radius must be at least 1"));
        }
        let p = &self.damage_distribution;
        if p.iter().any(|v| !(*v >= 0.0)) || libm::fabs(p.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(invalid!("damage_distribution must be non-negative and sum to 1, got {p:?}"));
        }
        if !(0.0..=1.0).contains(&self.event_fraction) {
            return Err(invalid!("event_fraction must lie in [0, 1]"));
        }
        if !(self.gsd_ft > 0.0) || !self.gsd_ft.is_finite() {
            return Err(invalid!("gsd_ft must be positive"));
        }
        Ok(())
    }

    /// Checks that the image size suits a network of the given depth.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        if self.image_size % (1 << depth) != 0 {
            return Err(invalid!("image_size {} is not divisible by 2^{depth}", self.image_size));
        }
        Ok(())
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.gsd_ft / FEET_PER_METRE
    }

    /// Geotransform of scene `index`.
    pub fn transform(&self, index: usize) -> GeoTransform {
        let col = (index % SYNTH_GRID_COLUMNS) as f64;
        let row = (index / SYNTH_GRID_COLUMNS) as f64;
        let s = self.pixel_size_m();
        GeoTransform {
            origin_x: SYNTH_ORIGIN.0 + col * SYNTH_SPACING_M,
            origin_y: SYNTH_ORIGIN.1 - row * SYNTH_SPACING_M,
            pixel_size_x: s,
            pixel_size_y: -s,
        }
    }

    fn rng(&self, index: usize, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream + index as u64);
        r
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth value noise in roughly [-1, 1], `cell` pixels between lattice points.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            // smoothstep weights
            let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - sx) + at(ix + 1, iy) * sx;
            let bot = at(ix, iy + 1) * (1.0 - sx) + at(ix + 1, iy + 1) * sx;
            out.push(top * (1.0 - sy) + bot * sy);
        }
    }
    out
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: [Vec<f64>; 3],
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, rgb: [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]] }
    }

    fn set(&mut self, i: usize, c: [f64; 3]) {
        for k in 0..3 {
            self.rgb[k][i] = c[k];
        }
    }

    fn get(&self, i: usize) -> [f64; 3] {
        [self.rgb[0][i], self.rgb[1][i], self.rgb[2][i]]
    }

    fn into_raster(self, gt: GeoTransform, crs: &str) -> Result<GeoRaster> {
        let data: Vec<f32> = self.rgb.iter().flat_map(|c| c.iter().map(|&v| v.clamp(0.0, 1.0) as f32)).collect();
        GeoRaster::new(self.w, self.h, data, gt, crs, RGB_CHANNELS.iter().map(|s| s.to_string()).collect())
    }
}

/// Tan ground with low-frequency variation and pixel noise.
fn ground(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Canvas {
    let base = [0.55 + 0.05 * rng.random_range(-1.0..1.0), 0.48, 0.33];
    let field = value_noise(rng, w, h, 16);
    let mut c = Canvas::new(w, h);
    for i in 0..w * h {
        let f = 0.02 * field[i];
        c.set(i, [base[0] + f + 0.03 * normal(rng), base[1] + f + 0.03 * normal(rng), base[2] + 0.6 * f + 0.03 * normal(rng)]);
    }
    c
}

const ROOF_PALETTE: [[f64; 3]; 4] = [[0.82, 0.82, 0.84], [0.70, 0.25, 0.20], [0.30, 0.32, 0.38], [0.92, 0.86, 0.62]];

#[derive(Debug, Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn overlaps_with_gap(&self, o: &Rect, gap: usize) -> bool {
        self.x < o.x + o.w + gap && o.x < self.x + self.w + gap && self.y < o.y + o.h + gap && o.y < self.y + self.h + gap
    }

    fn pixels(&self, img_w: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| (x, y, y * img_w + x)))
    }
}

/// Non-overlapping rectangles with at least `gap` pixels between them.
fn place_rects(rng: &mut ChaCha8Rng, n: usize, size: [usize; 2], img: usize, gap: usize, taken: &mut Vec<Rect>) -> Vec<Rect> {
    let mut out = Vec::new();
    for _ in 0..n {
        for _attempt in 0..50 {
            let w = rng.random_range(size[0]..=size[1]);
            let h = rng.random_range(size[0]..=size[1]);
            let r = Rect { x: rng.random_range(1..img - w), y: rng.random_range(1..img - h), w, h };
            if taken.iter().all(|t| !r.overlaps_with_gap(t, gap)) {
                taken.push(r);
                out.push(r);
                break;
            }
        }
    }
    out
}

fn sample_level(rng: &mut ChaCha8Rng, p: &[f64; 4]) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k as u8 + 1;
        }
    }
    // rounding slack lands on the last level with mass
    p.iter().rposition(|&v| v > 0.0).map_or(1, |k| k as u8 + 1)
}

/// Pre and post images plus per-pixel damage truth for scene `index`.
pub fn generate_damage_pair(config: &SynthConfig, index: usize) -> Result<(GeoRaster, GeoRaster, DamageMask)> {
    config.validate()?;
    let n = config.image_size;
    let mut rng = config.rng(index, 0);
    let ground_pre = ground(&mut rng, n, n);
    // the ground under the roofs, as seen after the event
    let mut post = Canvas::new(n, n);
    for i in 0..n * n {
        let g = ground_pre.get(i);
        post.set(i, [g[0] + 0.02 * normal(&mut rng), g[1] + 0.02 * normal(&mut rng), g[2] + 0.02 * normal(&mut rng)]);
    }
    let mut pre = ground_pre;
    let mut truth = vec![0u8; n * n];
    let hit = rng.random_bool(config.event_fraction);
    let count = rng.random_range(config.n_buildings[0]..=config.n_buildings[1]);
    let rects = place_rects(&mut rng, count, config.building_size, n, 2, &mut Vec::new());
    for r in &rects {
        let roof = ROOF_PALETTE[rng.random_range(0..ROOF_PALETTE.len())];
        let level = if hit { sample_level(&mut rng, &config.damage_distribution) } else { 1 };
        for (x, y, i) in r.pixels(n) {
            let c = [roof[0] + 0.02 * normal(&mut rng), roof[1] + 0.02 * normal(&mut rng), roof[2] + 0.02 * normal(&mut rng)];
            pre.set(i, c);
            truth[i] = level;
            let (lx, ly) = (x - r.x, y - r.y);
            let roof_after = match level {
                1 => Some(c),
                2 => Some(if rng.random_bool(0.3) { [c[0] * 0.55, c[1] * 0.55, c[2] * 0.55] } else { c }),
                3 => ((lx / 2 + ly / 2) % 2 == 0).then_some(c),
                _ => None,
            };
            if let Some(v) = roof_after {
                // same small global noise as the ground
                post.set(i, [v[0] + 0.02 * normal(&mut rng), v[1] + 0.02 * normal(&mut rng), v[2] + 0.02 * normal(&mut rng)]);
            }
        }
    }
    let gt = config.transform(index);
    let crs = SYNTH_CRS.to_string();
    let georef = Some(crate::mask::GeoRef { transform: gt, crs: crs.clone() });
    Ok((pre.into_raster(gt, &crs)?, post.into_raster(gt, &crs)?, DamageMask::new(n, n, truth)?.with_georef(georef)))
}

/// HAND in metres on a `m x m` grid: smoothed distance to a meandering
/// drainage line, growing roughly linearly away from it.
fn hand_surface(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let horizontal = rng.random_bool(0.5);
    let amp = rng.random_range(0.1..0.25) * m as f64;
    let freq = rng.random_range(0.5..1.5);
    let phase = rng.random_range(0.0..core::f64::consts::TAU);
    let offset = rng.random_range(0.35..0.65) * m as f64;
    let slope = rng.random_range(0.6..0.9);
    let field = value_noise(rng, m, m, 8);
    let mut dist = vec![0.0; m * m];
    for y in 0..m {
        for x in 0..m {
            let (u, v) = if horizontal { (x as f64, y as f64) } else { (y as f64, x as f64) };
            let centre = offset + amp * libm::sin(phase + freq * core::f64::consts::TAU * u / m as f64);
            dist[y * m + x] = libm::fabs(v - centre);
        }
    }
    // 3x3 box blur, then terrain noise
    let mut out = vec![0.0; m * m];
    for y in 0..m {
        for x in 0..m {
            let (mut s, mut k) = (0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < m && (ny as usize) < m {
                        s += dist[ny as usize * m + nx as usize];
                        k += 1.0;
                    }
                }
            }
            out[y * m + x] = (slope * s / k + 0.5 * field[y * m + x]).max(0.0);
        }
    }
    out
}

/// RGB scene, half-resolution HAND raster and semantic truth
/// (background, water, vegetation, road, building) for scene `index`.
pub fn generate_flood_scene(config: &SynthConfig, index: usize) -> Result<(GeoRaster, GeoRaster, ClassMask)> {
    config.validate()?;
    let n = config.image_size;
    let m = n / 2;
    let mut rng = config.rng(index, FLOOD_STREAM);
    let hand_coarse = hand_surface(&mut rng, m);
    // HAND seen at image resolution (nearest), for placement decisions
    let hand_at = |x: usize, y: usize| hand_coarse[(y / 2) * m + x / 2];

    let mut canvas = ground(&mut rng, n, n);
    let mut truth = vec![0u8; n * n];

    // vegetation patches from thresholded noise
    let veg = value_noise(&mut rng, n, n, 12);
    let veg_cut = rng.random_range(0.25..0.45);
    for i in 0..n * n {
        if veg[i] > veg_cut {
            truth[i] = CLASS_VEGETATION;
            canvas.set(i, [0.22 + 0.03 * normal(&mut rng), 0.45 + 0.04 * normal(&mut rng), 0.18 + 0.03 * normal(&mut rng)]);
        }
    }
    // one straight road
    let vertical = rng.random_bool(0.5);
    let road_w = rng.random_range(4..7);
    let road_at = rng.random_range(4..n - 4 - road_w);
    for y in 0..n {
        for x in 0..n {
            let t = if vertical { x } else { y };
            if (road_at..road_at + road_w).contains(&t) {
                let i = y * n + x;
                truth[i] = CLASS_ROAD;
                canvas.set(i, [0.45 + 0.02 * normal(&mut rng), 0.45 + 0.02 * normal(&mut rng), 0.47 + 0.02 * normal(&mut rng)]);
            }
        }
    }
    let count = rng.random_range(config.n_buildings[0]..=config.n_buildings[1]);
    let rects = place_rects(&mut rng, count, config.building_size, n, 2, &mut Vec::new());
    for r in &rects {
        let roof = ROOF_PALETTE[rng.random_range(0..ROOF_PALETTE.len())];
        for (_, _, i) in r.pixels(n) {
            truth[i] = CLASS_BUILDING;
            canvas.set(i, [roof[0] + 0.02 * normal(&mut rng), roof[1] + 0.02 * normal(&mut rng), roof[2] + 0.02 * normal(&mut rng)]);
        }
    }

    let wc = &config.water;
    let water_colour = |rng: &mut ChaCha8Rng| [0.16 + 0.03 * normal(rng), 0.26 + 0.03 * normal(rng), 0.42 + 0.03 * normal(rng)];
    let disc = |rng: &mut ChaCha8Rng, accept: &dyn Fn(usize, usize) -> bool, class: u8, truth: &mut Vec<u8>, canvas: &mut Canvas| {
        // centre on a random pixel that satisfies the HAND condition
        let cands: Vec<(usize, usize)> = (0..n * n).map(|i| (i % n, i / n)).filter(|&(x, y)| accept(x, y)).collect();
        if cands.is_empty() {
            return;
        }
        let (cx, cy) = cands[rng.random_range(0..cands.len())];
        let r = rng.random_range(wc.radius[0]..=wc.radius[1]) as f64;
        for y in 0..n {
            for x in 0..n {
                let d = libm::hypot(x as f64 - cx as f64, y as f64 - cy as f64);
                if d <= r && accept(x, y) {
                    let i = y * n + x;
                    truth[i] = class;
                    canvas.set(i, water_colour(rng));
                }
            }
        }
    };
    let blobs = rng.random_range(wc.count[0]..=wc.count[1]);
    let low = |x: usize, y: usize| hand_at(x, y) <= wc.max_hand;
    for _ in 0..blobs {
        disc(&mut rng, &low, CLASS_WATER, &mut truth, &mut canvas);
    }
    let confusers = rng.random_range(wc.confusers[0]..=wc.confusers[1]);
    let high = |x: usize, y: usize| hand_at(x, y) >= wc.confuser_min_hand;
    for _ in 0..confusers {
        disc(&mut rng, &high, CLASS_ROAD, &mut truth, &mut canvas);
    }

    let gt = config.transform(index);
    let crs = SYNTH_CRS.to_string();
    let hand_gt = GeoTransform { pixel_size_x: gt.pixel_size_x * 2.0, pixel_size_y: gt.pixel_size_y * 2.0, ..gt };
    let hand = GeoRaster::new(m, m, hand_coarse.iter().map(|&v| v as f32).collect(), hand_gt, crs.clone(), vec![HAND_CHANNEL.to_string()])?;
    let georef = Some(crate::mask::GeoRef { transform: gt, crs: crs.clone() });
    Ok((canvas.into_raster(gt, &crs)?, hand, ClassMask::new(n, n, truth)?.with_georef(georef)))
}

/// Zip and county polygons plus a price table covering the scenes of a
/// config, all in lon/lat.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRegion {
    pub zips: RegionIndex,
    pub counties: RegionIndex,
    pub zhvi: ZhviTable,
    /// Bounding box of all scenes, lon/lat.
    pub extent: BBox,
}

pub const SYNTH_ZIPS: [(&str, &str); 4] = [("77001", "95.5"), ("77002", "120"), ("77003", "143.25"), ("77004", "180.75")];

pub fn synth_region(config: &SynthConfig) -> Result<SynthRegion> {
    config.validate()?;
    let mut b = BBox::empty();
    let size_m = config.image_size as f64 * config.pixel_size_m();
    let rows = config.n_samples.div_ceil(SYNTH_GRID_COLUMNS).max(1);
    let cols = config.n_samples.clamp(1, SYNTH_GRID_COLUMNS);
    let (e0, n1) = SYNTH_ORIGIN;
    let e1 = e0 + (cols - 1) as f64 * SYNTH_SPACING_M + size_m;
    let n0 = n1 - (rows - 1) as f64 * SYNTH_SPACING_M - size_m;
    for (e, n) in [(e0, n0), (e1, n0), (e0, n1), (e1, n1)] {
        let (lon, lat) = SYNTH_CRS.to_lonlat(e, n);
        b.expand(lon, lat);
    }
    // margin so that no scene touches the outer edge
    let (mx, my) = (0.1 * b.width() + 1e-4, 0.1 * b.height() + 1e-4);
    let outer = BBox::from_corners(b.min_x - mx, b.min_y - my, b.max_x + mx, b.max_y + my);
    let (cx, cy) = outer.center();
    let mut zips = RegionIndex::new();
    let mut zhvi = ZhviTable::new("SYNTH-2018");
    let quads = [
        BBox::from_corners(outer.min_x, cy, cx, outer.max_y),
        BBox::from_corners(cx, cy, outer.max_x, outer.max_y),
        BBox::from_corners(outer.min_x, outer.min_y, cx, cy),
        BBox::from_corners(cx, outer.min_y, outer.max_x, cy),
    ];
    for ((zip, price), q) in SYNTH_ZIPS.iter().zip(quads) {
        zips.insert(*zip, vec![Polygon::rectangle(&q)]);
        zhvi.insert(zip, price.parse::<PricePerSqft>()?)?;
    }
    let mut counties = RegionIndex::new();
    counties.insert("West County", vec![Polygon::rectangle(&BBox::from_corners(outer.min_x, outer.min_y, cx, outer.max_y))]);
    counties.insert("East County", vec![Polygon::rectangle(&BBox::from_corners(cx, outer.min_y, outer.max_x, outer.max_y))]);
    Ok(SynthRegion { zips, counties, zhvi, extent: outer })
}

/// Identifier used for scene files.
pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{align_and_stack_hand, Resampling};

    fn small() -> SynthConfig {
        SynthConfig { n_samples: 10, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_pairs() {
        let c = small();
        assert_eq!(generate_damage_pair(&c, 3).unwrap(), generate_damage_pair(&c, 3).unwrap());
        assert_ne!(generate_damage_pair(&c, 3).unwrap().2, generate_damage_pair(&c, 4).unwrap().2);
        assert_eq!(generate_flood_scene(&c, 2).unwrap(), generate_flood_scene(&c, 2).unwrap());
    }

    #[test]
    fn all_intact_post_is_pre_plus_noise() {
        let c = SynthConfig { damage_distribution: [1.0, 0.0, 0.0, 0.0], event_fraction: 1.0, ..small() };
        for i in 0..5 {
            let (pre, post, truth) = generate_damage_pair(&c, i).unwrap();
            assert!(truth.data().iter().all(|&v| v <= 1));
            assert!(truth.data().contains(&1));
            let max_diff = pre.pixels().iter().zip(post.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            // 0.02-sigma noise on 12288 values stays well below 0.15
            assert!(max_diff < 0.15, "{max_diff}");
        }
    }

    #[test]
    fn destroyed_roofs_look_like_ground() {
        // each destroyed roof against the ground in a 3-pixel ring around it
        let c = SynthConfig { damage_distribution: [0.0, 0.0, 0.0, 1.0], event_fraction: 1.0, ..small() };
        let mut tested = 0;
        for i in 0..5 {
            let (_, post, truth) = generate_damage_pair(&c, i).unwrap();
            let (n, plane) = (post.width(), post.plane_len());
            let (labels, count) = crate::financial::label_components(&truth);
            for b in 1..=count {
                let roof: Vec<usize> = (0..plane).filter(|&p| labels[p] == b).collect();
                let ring: Vec<usize> = (0..plane)
                    .filter(|&p| {
                        truth.data()[p] == 0
                            && roof.iter().any(|&q| (p % n).abs_diff(q % n) <= 3 && (p / n).abs_diff(q / n) <= 3)
                    })
                    .collect();
                for ch in 0..3 {
                    let v = |idx: &[usize]| idx.iter().map(|&p| post.pixels()[ch * plane + p] as f64).collect::<Vec<_>>();
                    let t = welch_t(&v(&roof), &v(&ring));
                    assert!(t.abs() < 4.0, "scene {i} building {b} channel {ch}: t = {t}");
                }
                tested += 1;
            }
        }
        assert!(tested >= 15);
    }

    fn welch_t(a: &[f64], b: &[f64]) -> f64 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
        let (ma, mb) = (mean(a), mean(b));
        (ma - mb) / libm::sqrt(var(a, ma) / a.len() as f64 + var(b, mb) / b.len() as f64)
    }

    #[test]
    fn masks_use_declared_classes() {
        let c = small();
        for i in 0..10 {
            let (_, _, d) = generate_damage_pair(&c, i).unwrap();
            assert!(d.max_class() <= 4);
            assert!(d.data().iter().any(|&v| v > 0));
            let (rgb, hand, s) = generate_flood_scene(&c, i).unwrap();
            assert!(s.max_class() <= 4);
            assert_eq!((hand.width(), rgb.width()), (32, 64));
        }
    }

    #[test]
    fn water_sits_low() {
        let c = small();
        let (mut wet, mut dry) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..10 {
            let (rgb, hand, truth) = generate_flood_scene(&c, i).unwrap();
            let stacked = align_and_stack_hand(&rgb, &hand, Resampling::Nearest).unwrap();
            let h = stacked.channel(3);
            for (p, &t) in truth.data().iter().enumerate() {
                let acc = if t == 1 { &mut wet } else { &mut dry };
                acc.0 += h[p] as f64;
                acc.1 += 1;
            }
        }
        assert!(wet.1 > 0);
        assert!(wet.0 / (wet.1 as f64) < dry.0 / (dry.1 as f64));
    }

    #[test]
    fn confusers_share_water_colour() {
        let c = small();
        let (mut water, mut wet_road) = (Vec::new(), Vec::new());
        for i in 0..10 {
            let (rgb, hand, truth) = generate_flood_scene(&c, i).unwrap();
            let stacked = align_and_stack_hand(&rgb, &hand, Resampling::Nearest).unwrap();
            for (p, &t) in truth.data().iter().enumerate() {
                let b = rgb.channel(2)[p] as f64;
                if t == 1 {
                    water.push(b);
                } else if t == 3 && stacked.channel(3)[p] >= c.water.confuser_min_hand as f32 && b < 0.5 && rgb.channel(0)[p] < 0.3 {
                    wet_road.push(b);
                }
            }
        }
        assert!(!wet_road.is_empty());
        assert!(welch_t(&water, &wet_road).abs() < 4.0);
    }

    #[test]
    fn region_covers_scenes() {
        let c = SynthConfig { n_samples: 45, ..SynthConfig::default() };
        let r = synth_region(&c).unwrap();
        assert_eq!(r.zhvi.len(), 4);
        for i in [0, 19, 20, 44] {
            let gt = c.transform(i);
            let (lon, lat) = SYNTH_CRS.to_lonlat(gt.origin_x + 16.0, gt.origin_y - 16.0);
            let z = r.zips.assign(lat, lon).unwrap();
            assert!(r.zhvi.get(z).is_some());
            assert!(r.counties.assign(lat, lon).is_ok());
        }
    }

    #[test]
    fn bad_configs() {
        assert!(SynthConfig { damage_distribution: [0.5, 0.5, 0.5, 0.0], ..small() }.validate().is_err());
        assert!(SynthConfig { image_size: 30, ..small() }.check_depth(3).is_err());
        assert!(SynthConfig { building_size: [9, 4], ..small() }.validate().is_err());
    }
}
