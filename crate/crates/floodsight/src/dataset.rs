//! On-disk datasets: the manifest written by `synth`, and xBD-style trees.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use floodsight_core::mask::{ClassMask, GeoRef};
use floodsight_core::synth::SynthConfig;
use floodsight_core::GeoRaster;
use serde::{Deserialize, Serialize};

use crate::atomic::write_json_atomic;
use crate::geotiff::read_geotiff;
use crate::mask_png::read_mask_png;
use crate::Invalid;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "floodsight-dataset";

/// One pre/post pair and its damage mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageEntry {
    pub name: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub mask: Option<PathBuf>,
}

/// One imagery tile with its HAND raster and semantic mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodEntry {
    pub name: String,
    pub rgb: PathBuf,
    pub hand: Option<PathBuf>,
    pub mask: Option<PathBuf>,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub damage: Vec<DamageEntry>,
    #[serde(default)]
    pub flood: Vec<FloodEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zhvi_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zips_geojson: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counties_geojson: Option<PathBuf>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            synth: None,
            damage: Vec::new(),
            flood: Vec::new(),
            zhvi_csv: None,
            zips_geojson: None,
            counties_geojson: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json_atomic(&dir.join(MANIFEST), self)
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        if self.format != MANIFEST_FORMAT || self.version != 1 {
            bail!("{}: not a version 1 {MANIFEST_FORMAT} manifest", origin.display());
        }
        Ok(())
    }

    /// Every referenced path made absolute against `dir`, checked to exist.
    fn resolved(mut self, dir: &Path) -> Result<Self> {
        let fix = |p: &mut PathBuf| -> Result<()> {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
            if !p.exists() {
                bail!("dataset file {} does not exist", p.display());
            }
            Ok(())
        };
        for d in &mut self.damage {
            fix(&mut d.pre)?;
            fix(&mut d.post)?;
            d.mask.as_mut().map(fix).transpose()?;
        }
        for f in &mut self.flood {
            fix(&mut f.rgb)?;
            f.hand.as_mut().map(fix).transpose()?;
            f.mask.as_mut().map(fix).transpose()?;
        }
        for p in [&mut self.zhvi_csv, &mut self.zips_geojson, &mut self.counties_geojson].into_iter().flatten() {
            fix(p)?;
        }
        Ok(self)
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}

/// Load `dir/manifest.json`, or scan `dir` as an xBD tree when there is no
/// manifest. Referenced files must exist.
pub fn open_dataset(dir: &Path) -> Result<Manifest> {
    let run = || -> Result<Manifest> {
        if !dir.is_dir() {
            bail!("dataset directory {} does not exist", dir.display());
        }
        let mp = dir.join(MANIFEST);
        let m = if mp.exists() {
            let text = std::fs::read_to_string(&mp).with_context(|| format!("reading {}", mp.display()))?;
            let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", mp.display()))?;
            m.validate(&mp)?;
            m
        } else {
            scan_xbd(dir)?
        };
        m.resolved(dir)
    };
    run().context(Invalid)
}

const PRE_SUFFIX: &str = "_pre_disaster";
const POST_SUFFIX: &str = "_post_disaster";

/// xBD layout: `images/<name>_pre_disaster.tif`, `images/<name>_post_disaster.tif`
/// and, when present, rasterized labels in
/// `targets/<name>_post_disaster_target.png` (0 background, 1 to 4 damage).
pub fn scan_xbd(dir: &Path) -> Result<Manifest> {
    let images = dir.join("images");
    if !images.is_dir() {
        bail!("{}: neither {MANIFEST} nor an images/ directory", dir.display());
    }
    let mut names: Vec<String> = std::fs::read_dir(&images)
        .with_context(|| format!("listing {}", images.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let f = e.file_name().into_string().ok()?;
            let stem = f.strip_suffix(".tif").or_else(|| f.strip_suffix(".tiff"))?;
            stem.strip_suffix(PRE_SUFFIX).map(str::to_string)
        })
        .collect();
    names.sort();
    let mut m = Manifest::new();
    for name in names {
        let pre = images.join(format!("{name}{PRE_SUFFIX}.tif"));
        let post = PathBuf::from("images").join(format!("{name}{POST_SUFFIX}.tif"));
        if !dir.join(&post).exists() {
            bail!("{} has no post-event partner", pre.display());
        }
        let target = PathBuf::from("targets").join(format!("{name}{POST_SUFFIX}_target.png"));
        let mask = dir.join(&target).exists().then_some(target);
        m.damage.push(DamageEntry { pre: PathBuf::from("images").join(format!("{name}{PRE_SUFFIX}.tif")), post, mask, name });
    }
    if m.damage.is_empty() {
        bail!("{}: no *{PRE_SUFFIX}.tif images", images.display());
    }
    Ok(m)
}

/// A mask file, taking the georeference of `like` when the file has none.
pub fn read_mask_like(path: &Path, like: &GeoRaster) -> Result<ClassMask> {
    let m = read_mask_png(path)?;
    if (m.width(), m.height()) != (like.width(), like.height()) {
        bail!("{}: mask is {}x{}, image is {}x{}", path.display(), m.width(), m.height(), like.width(), like.height());
    }
    Ok(match m.georef {
        Some(_) => m,
        None => m.with_georef(Some(GeoRef { transform: like.geotransform, crs: like.crs.clone() })),
    })
}

pub struct DamageItem {
    pub name: String,
    pub pre: GeoRaster,
    pub post: GeoRaster,
    pub mask: Option<ClassMask>,
}

pub fn load_damage(e: &DamageEntry) -> Result<DamageItem> {
    let pre = read_geotiff(&e.pre)?;
    let post = read_geotiff(&e.post)?;
    let mask = e.mask.as_ref().map(|p| read_mask_like(p, &pre)).transpose()?;
    Ok(DamageItem { name: e.name.clone(), pre, post, mask })
}

pub struct FloodItem {
    pub name: String,
    pub rgb: GeoRaster,
    pub hand: Option<GeoRaster>,
    pub mask: Option<ClassMask>,
}

pub fn load_flood(e: &FloodEntry) -> Result<FloodItem> {
    let rgb = read_geotiff(&e.rgb)?;
    let hand = e.hand.as_ref().map(|p| read_geotiff(p)).transpose()?;
    let mask = e.mask.as_ref().map(|p| read_mask_like(p, &rgb)).transpose()?;
    Ok(FloodItem { name: e.name.clone(), rgb, hand, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geotiff::write_geotiff;
    use crate::mask_png::write_mask_png;
    use floodsight_core::GeoTransform;

    #[test]
    fn xbd_tree_is_scanned_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        std::fs::create_dir_all(&images).unwrap();
        std::fs::create_dir_all(dir.path().join("targets")).unwrap();
        let gt = GeoTransform::new(500_000.0, 3_300_000.0, 0.5, -0.5).unwrap();
        let r = GeoRaster::filled(4, 4, &["R", "G", "B"], 0.5, gt, "EPSG:32615").unwrap();
        for n in ["b_00000002", "a_00000001"] {
            write_geotiff(&images.join(format!("{n}_pre_disaster.tif")), &r).unwrap();
            write_geotiff(&images.join(format!("{n}_post_disaster.tif")), &r).unwrap();
        }
        let t = ClassMask::new(4, 4, vec![0, 1, 2, 3, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        write_mask_png(&dir.path().join("targets/a_00000001_post_disaster_target.png"), &t).unwrap();
        let m = open_dataset(dir.path()).unwrap();
        assert_eq!(m.damage.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(), ["a_00000001", "b_00000002"]);
        let a = load_damage(&m.damage[0]).unwrap();
        let mask = a.mask.unwrap();
        assert_eq!(mask.data(), t.data());
        assert_eq!(mask.georef.unwrap().transform, gt);
        assert!(m.damage[1].mask.is_none());
    }

    #[test]
    fn missing_files_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new();
        m.damage.push(DamageEntry { name: "x".into(), pre: "x_pre.tif".into(), post: "x_post.tif".into(), mask: None });
        m.write(dir.path()).unwrap();
        let e = open_dataset(dir.path()).unwrap_err();
        assert!(e.downcast_ref::<Invalid>().is_some());
        assert!(format!("{e:#}").contains("x_pre.tif"));
        assert!(open_dataset(&dir.path().join("nope")).is_err());
    }
}
