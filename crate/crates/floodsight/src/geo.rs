//! GeoJSON (RFC 7946, lon/lat) input and output.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use floodsight_core::crs::Crs;
use floodsight_core::financial::{BuildingRecord, RegionIndex};
use floodsight_core::flood::{trace_pixel_set, FloodExtent, PixelLoop};
use floodsight_core::geom::Polygon;
use floodsight_core::mask::{DamageLevel, GeoRef};
use floodsight_core::usng::{parse_usng, AggregationLevel, CellTotals, GridSummary};
use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, JsonValue, Value};
use serde_json::json;

use crate::atomic::write_bytes_atomic;
use crate::formats::UNASSIGNED_ROW;

fn write_collection(path: &Path, features: Vec<Feature>) -> Result<()> {
    let fc = FeatureCollection { bbox: None, features, foreign_members: None };
    let mut s = GeoJson::from(fc).to_string();
    s.push('\n');
    write_bytes_atomic(path, s.as_bytes())
}

pub fn read_collection(path: &Path) -> Result<FeatureCollection> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let gj: GeoJson = text.parse().with_context(|| format!("parsing GeoJSON {}", path.display()))?;
    FeatureCollection::try_from(gj).with_context(|| format!("{}: not a FeatureCollection", path.display()))
}

fn feature(geometry: Option<Value>, properties: JsonObject) -> Feature {
    Feature { bbox: None, geometry: geometry.map(Geometry::new), id: None, properties: Some(properties), foreign_members: None }
}

fn props(v: JsonValue) -> JsonObject {
    match v {
        JsonValue::Object(m) => m,
        _ => unreachable!("properties are built from object literals"),
    }
}

fn ring(points: &[[f64; 2]]) -> Vec<Vec<f64>> {
    let mut r: Vec<Vec<f64>> = points.iter().map(|p| vec![p[0], p[1]]).collect();
    if points.first() != points.last() {
        r.push(vec![points[0][0], points[0][1]]);
    }
    r
}

fn polygon_json(p: &Polygon) -> Vec<Vec<Vec<f64>>> {
    p.rings().map(|r| ring(r)).collect()
}

fn polygon_from_json(rings: &[Vec<Vec<f64>>]) -> Result<Polygon> {
    let mut it = rings.iter().map(|r| r.iter().map(|p| if p.len() >= 2 { Ok([p[0], p[1]]) } else { Err(anyhow!("short position")) }).collect::<Result<Vec<_>>>());
    let exterior = it.next().ok_or_else(|| anyhow!("polygon without rings"))??;
    let holes = it.collect::<Result<Vec<_>>>()?;
    Ok(Polygon::new(exterior, holes))
}

/// Zip or county polygons. The region name comes from the first present
/// property among `keys`.
pub fn read_regions(path: &Path, keys: &[&str]) -> Result<RegionIndex> {
    let fc = read_collection(path)?;
    let mut idx = RegionIndex::new();
    for (i, f) in fc.features.iter().enumerate() {
        let ctx = || format!("{} feature {i}", path.display());
        let name = keys
            .iter()
            .find_map(|k| f.property(k))
            .map(|v| match v {
                JsonValue::String(s) => s.clone(),
                other => other.to_string(),
            })
            .ok_or_else(|| anyhow!("no {} property", keys.join("/")))
            .with_context(ctx)?;
        let g = f.geometry.as_ref().ok_or_else(|| anyhow!("missing geometry")).with_context(ctx)?;
        let parts = match &g.value {
            Value::Polygon(p) => vec![polygon_from_json(p).with_context(ctx)?],
            Value::MultiPolygon(ps) => ps.iter().map(|p| polygon_from_json(p)).collect::<Result<_>>().with_context(ctx)?,
            _ => bail!("{}: regions must be polygons", ctx()),
        };
        idx.insert(name, parts);
    }
    Ok(idx)
}

pub fn write_regions(path: &Path, idx: &RegionIndex, key: &str) -> Result<()> {
    let features = idx
        .regions()
        .map(|(name, parts)| {
            let geom = if parts.len() == 1 {
                Value::Polygon(polygon_json(&parts[0]))
            } else {
                Value::MultiPolygon(parts.iter().map(polygon_json).collect())
            };
            let mut p = JsonObject::new();
            p.insert(key.to_string(), JsonValue::String(name.to_string()));
            feature(Some(geom), p)
        })
        .collect();
    write_collection(path, features)
}

/// A building with the scene it came from and its outline in lon/lat.
#[derive(Debug, Clone, PartialEq)]
pub struct AssessedBuilding {
    pub scene: String,
    pub record: BuildingRecord,
    pub outline: Vec<Vec<[f64; 2]>>,
}

fn loop_to_lonlat(l: &PixelLoop, georef: &GeoRef, crs: Crs) -> Vec<[f64; 2]> {
    l.to_geo(&georef.transform)
        .into_iter()
        .map(|[x, y]| {
            let (lon, lat) = crs.to_lonlat(x, y);
            [lon, lat]
        })
        .collect()
}

/// Pixel-edge outline of a building, mapped to lon/lat.
pub fn building_outline(b: &BuildingRecord, mask_width: usize, georef: &GeoRef) -> Result<Vec<Vec<[f64; 2]>>> {
    let crs = Crs::parse(&georef.crs)?;
    let mut loops = trace_pixel_set(&b.pixels, mask_width);
    // the outer loop first, holes after
    loops.sort_by(|a, b| b.signed_area().total_cmp(&a.signed_area()));
    Ok(loops.iter().map(|l| loop_to_lonlat(l, georef, crs)).collect())
}

pub fn write_buildings(path: &Path, buildings: &[AssessedBuilding]) -> Result<()> {
    let features = buildings
        .iter()
        .map(|a| {
            let b = &a.record;
            let p = props(json!({
                "scene": a.scene,
                "id": b.id,
                "damage_level": b.damage_level as u8,
                "damage": b.damage_level.name(),
                "footprint_milli_sqft": b.footprint_milli_sqft,
                "footprint_sqft": b.footprint_sqft(),
                "centroid_lat": b.centroid_lat,
                "centroid_lon": b.centroid_lon,
                "zip": b.zip,
                "county": b.county,
                "cost_usd_cents": b.cost_cents,
            }));
            let geom = if a.outline.is_empty() {
                Value::Point(vec![b.centroid_lon, b.centroid_lat])
            } else {
                Value::Polygon(a.outline.iter().map(|r| ring(r)).collect())
            };
            feature(Some(geom), p)
        })
        .collect();
    write_collection(path, features)
}

/// Building records from a buildings GeoJSON; pixel sets are not stored and
/// come back empty, outlines are kept.
pub fn read_buildings(path: &Path) -> Result<Vec<AssessedBuilding>> {
    let fc = read_collection(path)?;
    fc.features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ctx = || format!("{} feature {i}", path.display());
            let p = f.properties.as_ref().ok_or_else(|| anyhow!("missing properties")).with_context(ctx)?;
            let num = |k: &str| p.get(k).and_then(JsonValue::as_f64).ok_or_else(|| anyhow!("missing numeric {k}"));
            let uint = |k: &str| p.get(k).and_then(JsonValue::as_u64).ok_or_else(|| anyhow!("missing integer {k}"));
            let text = |k: &str| p.get(k).and_then(JsonValue::as_str).map(str::to_string);
            let level = DamageLevel::from_u8(uint("damage_level").with_context(ctx)? as u8).ok_or_else(|| anyhow!("damage_level out of range")).with_context(ctx)?;
            let record = BuildingRecord {
                id: uint("id").with_context(ctx)? as u32,
                pixels: Vec::new(),
                footprint_milli_sqft: uint("footprint_milli_sqft").with_context(ctx)?,
                centroid_lat: num("centroid_lat").with_context(ctx)?,
                centroid_lon: num("centroid_lon").with_context(ctx)?,
                damage_level: level,
                zip: text("zip"),
                county: text("county"),
                cost_cents: p.get("cost_usd_cents").and_then(JsonValue::as_u64),
            };
            let outline = match f.geometry.as_ref().map(|g| &g.value) {
                Some(Value::Polygon(rings)) => rings.iter().map(|r| r.iter().map(|q| [q[0], q[1]]).collect()).collect(),
                _ => Vec::new(),
            };
            Ok(AssessedBuilding { scene: text("scene").unwrap_or_default(), record, outline })
        })
        .collect()
}

fn totals_props(key: &str, t: &CellTotals) -> JsonObject {
    props(json!({
        "cell": key,
        "total_cost_usd_cents": t.total_cost_cents,
        "count_no_damage": t.counts[1],
        "count_minor": t.counts[2],
        "count_major": t.counts[3],
        "count_destroyed": t.counts[4],
        "building_total": t.building_total,
    }))
}

/// One feature per bucket in key order. USNG cells get their bbox polygon;
/// zip/county buckets get the region polygons when `regions` is given.
/// Buildings without a key appear as a final feature with null geometry.
pub fn write_summary_geojson(path: &Path, s: &GridSummary, regions: Option<&RegionIndex>) -> Result<()> {
    let mut features = Vec::with_capacity(s.buckets.len() + 1);
    for (k, t) in &s.buckets {
        let geom = match s.level {
            Some(AggregationLevel::Usng { .. }) => {
                let b = parse_usng(k)?.bbox();
                Some(Value::Polygon(polygon_json(&Polygon::rectangle(&b))))
            }
            _ => regions.and_then(|r| r.regions().find(|(n, _)| n == k)).map(|(_, parts)| Value::MultiPolygon(parts.iter().map(polygon_json).collect())),
        };
        features.push(feature(geom, totals_props(k, t)));
    }
    if s.unassigned.building_total > 0 {
        features.push(feature(None, totals_props(UNASSIGNED_ROW, &s.unassigned)));
    }
    write_collection(path, features)
}

/// Flood lines as closed LineStrings in lon/lat.
pub fn write_flood_lines(path: &Path, extent: &FloodExtent, scene: &str) -> Result<()> {
    let crs = Crs::parse(&extent.water.crs)?;
    let georef = GeoRef { transform: extent.water.geotransform, crs: extent.water.crs.clone() };
    let features = extent
        .boundaries
        .iter()
        .map(|l| {
            let coords = loop_to_lonlat(l, &georef, crs).into_iter().map(|p| vec![p[0], p[1]]).collect();
            let p = props(json!({ "scene": scene, "edge_count": l.edge_count, "hole": l.is_hole() }));
            feature(Some(Value::LineString(coords)), p)
        })
        .collect();
    write_collection(path, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use floodsight_core::raster::BBox;
    use floodsight_core::usng::{aggregate, usng_to_bbox};

    #[test]
    fn regions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = RegionIndex::new();
        idx.insert("77002", vec![Polygon::rectangle(&BBox::from_corners(-95.4, 29.7, -95.3, 29.8))]);
        idx.insert("77003", vec![Polygon::rectangle(&BBox::from_corners(-95.3, 29.7, -95.2, 29.8)), Polygon::rectangle(&BBox::from_corners(-95.0, 29.7, -94.9, 29.8))]);
        let p = dir.path().join("zips.geojson");
        write_regions(&p, &idx, "zip").unwrap();
        assert_eq!(read_regions(&p, &["ZCTA5CE10", "zip"]).unwrap(), idx);
        assert!(read_regions(&p, &["county"]).is_err());
    }

    #[test]
    fn empty_and_single_cell_summary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.geojson");
        write_summary_geojson(&p, &GridSummary::default(), None).unwrap();
        assert!(read_collection(&p).unwrap().features.is_empty());
        let b = BuildingRecord { centroid_lat: 29.76, centroid_lon: -95.37, damage_level: DamageLevel::Minor, cost_cents: Some(42), ..Default::default() };
        let s = aggregate(&[b], AggregationLevel::Usng { precision: 2 });
        write_summary_geojson(&p, &s, None).unwrap();
        let fc = read_collection(&p).unwrap();
        assert_eq!(fc.features.len(), 1);
        let f = &fc.features[0];
        let cell = f.property("cell").unwrap().as_str().unwrap();
        let bb = usng_to_bbox(cell).unwrap();
        let Some(Value::Polygon(rings)) = f.geometry.as_ref().map(|g| &g.value) else { panic!("polygon expected") };
        assert_eq!(rings[0][0], vec![bb.min_x, bb.min_y]);
        assert_eq!(rings[0][2], vec![bb.max_x, bb.max_y]);
        assert_eq!(f.property("total_cost_usd_cents").unwrap().as_u64(), Some(42));
    }

    #[test]
    fn buildings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = BuildingRecord {
            id: 3,
            footprint_milli_sqft: 900_000,
            centroid_lat: 29.7,
            centroid_lon: -95.3,
            damage_level: DamageLevel::Major,
            zip: Some("77002".into()),
            county: None,
            cost_cents: Some(123),
            pixels: Vec::new(),
        };
        let a = AssessedBuilding { scene: "scene_00001".into(), record: r, outline: vec![vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]] };
        let p = dir.path().join("b.geojson");
        write_buildings(&p, std::slice::from_ref(&a)).unwrap();
        assert_eq!(read_buildings(&p).unwrap(), vec![a]);
    }
}
