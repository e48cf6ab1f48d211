//! Building footprints from damage masks and their repair-cost estimates.
//!
//! All money is integer cents. Prices are held in units of 1e-4 USD per ft²,
//! damage factors in parts per million and the story multiplier in
//! thousandths, so a cost is one exact integer product followed by a single
//! round-half-up division.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crs::Crs;
use crate::error::{invalid, Error, Result};
use crate::geom::{Point, Polygon};
use crate::mask::{DamageLevel, DamageMask};
use crate::raster::GeoTransform;

pub const FEET_PER_METRE: f64 = 1.0 / 0.3048;

/// Price per square foot in units of 1e-4 USD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PricePerSqft(u64);

impl PricePerSqft {
    pub const SCALE: u64 = 10_000;

    pub fn from_units(units: u64) -> Self {
        PricePerSqft(units)
    }

    pub fn from_cents(cents: u64) -> Self {
        PricePerSqft(cents * 100)
    }

    /// Nearest representable price; for config values given as floats.
    pub fn from_usd(usd: f64) -> Result<Self> {
        if !(usd > 0.0) || !usd.is_finite() {
            return Err(invalid!("price per ft² must be positive, got {usd}"));
        }
        Ok(PricePerSqft(libm::round(usd * Self::SCALE as f64) as u64))
    }

    pub fn units(self) -> u64 {
        self.0
    }

    pub fn usd(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }
}

impl FromStr for PricePerSqft {
    type Err = Error;

    /// Plain decimal, at most four fractional digits, e.g. `142.5`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad price {s:?}"));
        let t = s.trim();
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 4 {
            return Err(bad());
        }
        let i: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let mut f: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        for _ in frac.len()..4 {
            f *= 10;
        }
        let units = i.checked_mul(Self::SCALE).and_then(|v| v.checked_add(f)).ok_or_else(bad)?;
        if units == 0 {
            return Err(Error::InvalidInput(format!("price must be positive, got {s:?}")));
        }
        Ok(PricePerSqft(units))
    }
}

impl fmt::Display for PricePerSqft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (i, r) = (self.0 / Self::SCALE, self.0 % Self::SCALE);
        if r == 0 {
            return write!(f, "{i}");
        }
        let mut frac = format!("{r:04}");
        while frac.ends_with('0') {
            frac.pop();
        }
        write!(f, "{i}.{frac}")
    }
}

impl Serialize for PricePerSqft {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PricePerSqft {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            S(String),
            F(f64),
        }
        match Raw::deserialize(d)? {
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::F(v) => PricePerSqft::from_usd(v).map_err(serde::de::Error::custom),
        }
    }
}

pub fn is_valid_zip(z: &str) -> bool {
    z.len() == 5 && z.bytes().all(|b| b.is_ascii_digit())
}

/// Per-zip price table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZhviTable {
    pub vintage: String,
    prices: BTreeMap<String, PricePerSqft>,
}

impl ZhviTable {
    pub fn new(vintage: impl Into<String>) -> Self {
        Self { vintage: vintage.into(), prices: BTreeMap::new() }
    }

    pub fn insert(&mut self, zip: &str, price: PricePerSqft) -> Result<()> {
        if !is_valid_zip(zip) {
            return Err(invalid!("zip code {zip:?} is not five digits"));
        }
        if price.units() == 0 {
            return Err(invalid!("price for {zip} must be positive"));
        }
        self.prices.insert(zip.to_string(), price);
        Ok(())
    }

    pub fn get(&self, zip: &str) -> Option<PricePerSqft> {
        self.prices.get(zip).copied()
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, PricePerSqft)> {
        self.prices.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Fraction of replacement cost per damage level. The defaults are
/// placeholders for sensitivity work, not calibrated values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DamageFactors {
    pub no_damage: f64,
    pub minor: f64,
    pub major: f64,
    pub destroyed: f64,
}

impl Default for DamageFactors {
    fn default() -> Self {
        Self { no_damage: 0.0, minor: 0.25, major: 0.6, destroyed: 1.0 }
    }
}

impl DamageFactors {
    pub fn validate(&self) -> Result<()> {
        let f = [self.no_damage, self.minor, self.major, self.destroyed];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!("damage factors must lie in [0, 1], got {f:?}"));
        }
        if f.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid!("damage factors must be non-decreasing in damage level, got {f:?}"));
        }
        Ok(())
    }

    pub fn factor(&self, level: DamageLevel) -> f64 {
        match level {
            DamageLevel::NoBuilding => 0.0,
            DamageLevel::NoDamage => self.no_damage,
            DamageLevel::Minor => self.minor,
            DamageLevel::Major => self.major,
            DamageLevel::Destroyed => self.destroyed,
        }
    }

    /// Factor in parts per million.
    pub fn ppm(&self, level: DamageLevel) -> u64 {
        libm::round(self.factor(level) * 1e6) as u64
    }
}

/// Everything besides the price table that goes into a cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub factors: DamageFactors,
    pub story_multiplier: f64,
    /// Used for zips missing from the table (or buildings with no zip).
    pub fallback_price: Option<PricePerSqft>,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { factors: DamageFactors::default(), story_multiplier: 2.0, fallback_price: None }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        self.factors.validate()?;
        if !(self.story_multiplier > 0.0) || !self.story_multiplier.is_finite() {
            return Err(invalid!("story multiplier must be positive, got {}", self.story_multiplier));
        }
        Ok(())
    }

    fn story_milli(&self) -> u64 {
        libm::round(self.story_multiplier * 1000.0) as u64
    }
}

/// One connected footprint in a damage mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub id: u32,
    /// Row-major pixel indices in the source mask.
    pub pixels: Vec<u32>,
    /// Footprint area in thousandths of a square foot.
    pub footprint_milli_sqft: u64,
    pub centroid_lat: f64,
    pub centroid_lon: f64,
    pub damage_level: DamageLevel,
    pub zip: Option<String>,
    pub county: Option<String>,
    pub cost_cents: Option<u64>,
}

impl Default for BuildingRecord {
    fn default() -> Self {
        Self {
            id: 0,
            pixels: Vec::new(),
            footprint_milli_sqft: 0,
            centroid_lat: 0.0,
            centroid_lon: 0.0,
            damage_level: DamageLevel::NoBuilding,
            zip: None,
            county: None,
            cost_cents: None,
        }
    }
}

impl BuildingRecord {
    pub fn footprint_sqft(&self) -> f64 {
        self.footprint_milli_sqft as f64 / 1000.0
    }
}

/// Majority class among levels 1-4, ties toward the higher level.
pub fn majority_level(counts: &[u64; 5]) -> DamageLevel {
    let mut best = 1;
    for l in 2..5 {
        if counts[l] >= counts[best] {
            best = l;
        }
    }
    DamageLevel::ALL[best]
}

/// Ground sample distance of a projected transform in ft/pixel, `None` for
/// non-square pixels or geographic grids.
pub fn gsd_feet(transform: &GeoTransform, crs: Crs) -> Option<f64> {
    let (sx, sy) = (transform.pixel_size_x, libm::fabs(transform.pixel_size_y));
    match crs {
        Crs::Utm { .. } if libm::fabs(sx - sy) <= 1e-9 * sx => Some(sx * FEET_PER_METRE),
        _ => None,
    }
}

/// 8-connected components of building pixels (label >= 1), labelled in
/// row-major order of their first pixel. Returns the label grid (0 for
/// background) and the component count.
pub fn label_components(mask: &DamageMask) -> (Vec<u32>, u32) {
    let (w, h) = (mask.width(), mask.height());
    let data = mask.data();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if data[j] != 0 && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Buildings in a damage mask. `gsd_ft` is the ground size of one pixel in
/// feet; centroids are pixel-centre means mapped through `transform`/`crs`.
pub fn extract_buildings(mask: &DamageMask, transform: &GeoTransform, crs: Crs, gsd_ft: f64) -> Result<Vec<BuildingRecord>> {
    if !(gsd_ft > 0.0) || !gsd_ft.is_finite() {
        return Err(invalid!("gsd must be positive, got {gsd_ft}"));
    }
    let w = mask.width();
    let (labels, n) = label_components(mask);
    let mut pixels: Vec<Vec<u32>> = vec![Vec::new(); n as usize];
    let mut counts = vec![[0u64; 5]; n as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            pixels[l as usize - 1].push(i as u32);
            counts[l as usize - 1][mask.data()[i] as usize] += 1;
        }
    }
    let milli_per_px = gsd_ft * gsd_ft * 1000.0;
    Ok(pixels
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(k, (px, c))| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for &i in &px {
                sx += (i as usize % w) as f64 + 0.5;
                sy += (i as usize / w) as f64 + 0.5;
            }
            let m = px.len() as f64;
            let (gx, gy) = transform.geo_of_pixel(sx / m, sy / m);
            let (lon, lat) = crs.to_lonlat(gx, gy);
            BuildingRecord {
                id: k as u32 + 1,
                footprint_milli_sqft: libm::round(m * milli_per_px) as u64,
                pixels: px,
                centroid_lat: lat,
                centroid_lon: lon,
                damage_level: majority_level(&c),
                ..BuildingRecord::default()
            }
        })
        .collect())
}

/// `area x stories x price x factor`, rounded half up to whole cents.
pub fn cost_cents(milli_sqft: u64, story_milli: u64, price: PricePerSqft, factor_ppm: u64) -> u64 {
    // units: 1e-3 ft² * 1e-3 * 1e-4 USD/ft² * 1e-6 = 1e-16 USD = 1e-14 cents
    const DENOM: u128 = 100_000_000_000_000;
    let num = milli_sqft as u128 * story_milli as u128 * price.units() as u128 * factor_ppm as u128;
    ((num + DENOM / 2) / DENOM) as u64
}

/// Cost of one building in cents.
pub fn estimate_cost(b: &BuildingRecord, zhvi: &ZhviTable, model: &CostModel) -> Result<u64> {
    if b.damage_level == DamageLevel::NoBuilding {
        return Ok(0);
    }
    let price = match b.zip.as_deref().and_then(|z| zhvi.get(z)) {
        Some(p) => p,
        None => model.fallback_price.ok_or_else(|| match &b.zip {
            Some(z) => Error::Lookup(format!("zip {z} not in the {} price table", zhvi.vintage)),
            None => Error::Lookup(format!("building {} has no zip code", b.id)),
        })?,
    };
    Ok(cost_cents(b.footprint_milli_sqft, model.story_milli(), price, model.factors.ppm(b.damage_level)))
}

/// Named polygons (zip codes or counties) for point lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionIndex {
    regions: Vec<(String, Vec<Polygon>)>,
    /// Boundary tolerance in degrees.
    pub tolerance: f64,
}

impl Default for RegionIndex {
    fn default() -> Self {
        Self { regions: Vec::new(), tolerance: 1e-6 }
    }
}

impl RegionIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds polygons under `name`; repeated names accumulate parts.
    pub fn insert(&mut self, name: impl Into<String>, parts: Vec<Polygon>) {
        let name = name.into();
        match self.regions.iter_mut().find(|(n, _)| *n == name) {
            Some((_, p)) => p.extend(parts),
            None => self.regions.push((name, parts)),
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> impl Iterator<Item = (&str, &[Polygon])> {
        self.regions.iter().map(|(n, p)| (n.as_str(), p.as_slice()))
    }

    /// Region containing the point, or the lexicographically smallest name
    /// among those whose boundary is within tolerance.
    pub fn assign(&self, lat: f64, lon: f64) -> Result<&str> {
        let p: Point = [lon, lat];
        let mut best: Option<&str> = None;
        for (name, parts) in &self.regions {
            let hit = parts.iter().any(|poly| {
                let bb = poly.bbox();
                let t = self.tolerance;
                if lon < bb.min_x - t || lon > bb.max_x + t || lat < bb.min_y - t || lat > bb.max_y + t {
                    return false;
                }
                poly.contains(p) || poly.distance_to_boundary(p) <= t
            });
            if hit && best.is_none_or(|b| name.as_str() < b) {
                best = Some(name);
            }
        }
        best.ok_or(Error::Unassigned { lat, lon })
    }
}

pub fn assign_zip(lat: f64, lon: f64, zips: &RegionIndex) -> Result<&str> {
    zips.assign(lat, lon)
}

/// Outcome counts of [`assess_buildings`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessReport {
    pub buildings: usize,
    pub without_zip: usize,
    pub without_county: usize,
    /// Buildings left without a cost because no price applied.
    pub unpriced: usize,
    pub total_cost_cents: u64,
}

/// Fills zip, county and cost for each building. Buildings that cannot be
/// priced keep `cost_cents = None` and are counted in the report.
pub fn assess_buildings(
    buildings: &mut [BuildingRecord],
    zips: Option<&RegionIndex>,
    counties: Option<&RegionIndex>,
    zhvi: &ZhviTable,
    model: &CostModel,
) -> Result<AssessReport> {
    model.validate()?;
    let mut r = AssessReport { buildings: buildings.len(), ..AssessReport::default() };
    for b in buildings.iter_mut() {
        if let Some(z) = zips {
            b.zip = z.assign(b.centroid_lat, b.centroid_lon).ok().map(str::to_string);
        }
        if let Some(c) = counties {
            b.county = c.assign(b.centroid_lat, b.centroid_lon).ok().map(str::to_string);
        }
        r.without_zip += b.zip.is_none() as usize;
        r.without_county += (counties.is_some() && b.county.is_none()) as usize;
        match estimate_cost(b, zhvi, model) {
            Ok(c) => {
                b.cost_cents = Some(c);
                r.total_cost_cents += c;
            }
            Err(Error::Lookup(_)) => {
                b.cost_cents = None;
                r.unpriced += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(r)
}
