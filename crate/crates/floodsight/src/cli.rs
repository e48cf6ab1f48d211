//! The `floodsight` command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use floodsight_core::crs::Crs;
use floodsight_core::financial::{assess_buildings, extract_buildings, gsd_feet, RegionIndex};
use floodsight_core::flood::extract_flood_extent;
use floodsight_core::mask::ClassMask;
use floodsight_core::metrics::{confusion, f1_per_class, iou, score_masks};
use floodsight_core::nn::{build_dual_unet, build_segmentation_unet, DualUNetModel, SegModel};
use floodsight_core::raster::{align_and_stack_hand, compute_stats, reassemble_mask, tile_raster, Resampling};
use floodsight_core::synth::{generate_damage_pair, generate_flood_scene, scene_name, synth_region};
use floodsight_core::training::{build_sampling_plan, compute_class_weights, damage_sample, segmentation_sample, train, History, Sample};
use floodsight_core::usng::{aggregate, AggregationLevel};
use floodsight_core::{DamageMask, GeoRaster};
use rayon::prelude::*;
use serde::Serialize;

use crate::atomic::write_json_atomic;
use crate::config::PipelineConfig;
use crate::dataset::{load_damage, load_flood, open_dataset, DamageEntry, FloodEntry, Manifest};
use crate::formats::{read_checkpoint, read_zhvi_csv, write_checkpoint, write_history_csv, write_summary_csv, write_zhvi_csv, Checkpoint, LoadedModel};
use crate::geo::{building_outline, read_buildings, read_regions, write_buildings, write_flood_lines, write_regions, write_summary_geojson, AssessedBuilding};
use crate::geotiff::write_geotiff;
use crate::mask_png::{read_mask_png, write_mask_png};
use crate::Invalid;

/// Property names tried, in order, for zip and county polygons.
pub const ZIP_KEYS: [&str; 4] = ["zip", "ZIP", "ZCTA5CE10", "GEOID10"];
pub const COUNTY_KEYS: [&str; 3] = ["county", "NAME", "name"];

#[derive(Debug, Parser)]
#[command(name = "floodsight", version, about = "Flood extent, building damage and cost mapping from aerial imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threads for tile inference and sample generation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// USNG precision 0..=5 (digits per axis) for aggregation.
    #[arg(long, global = true)]
    pub precision: Option<u8>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Semantic segmentation of imagery (+ HAND) for flood mapping.
    Segment,
    /// Pre/post building damage classification.
    Damage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Usng,
    Zip,
    County,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a segmentation or damage model.
    Train(TrainArgs),
    /// Run a checkpoint over a dataset or single inputs.
    Infer(InferArgs),
    /// Extract buildings from damage masks and price them.
    Assess(AssessArgs),
    /// Sum assessed buildings per USNG cell, zip or county.
    Aggregate(AggregateArgs),
    /// Compare predicted masks against ground truth.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path; history goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory; every entry is processed.
    #[arg(long, conflicts_with_all = ["pre", "image"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "post")]
    pub pre: Option<PathBuf>,
    #[arg(long, requires = "pre")]
    pub post: Option<PathBuf>,
    #[arg(long, conflicts_with = "pre")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    pub hand: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tile_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    /// A damage mask PNG or a directory of `*_damage.png` files.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub zhvi: Option<PathBuf>,
    #[arg(long)]
    pub zips: Option<PathBuf>,
    #[arg(long)]
    pub counties: Option<PathBuf>,
    /// Buildings GeoJSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub buildings: PathBuf,
    #[arg(long, value_enum)]
    pub level: Option<Level>,
    /// Zip or county polygons to attach as geometry.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Summary GeoJSON; the CSV is written beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_enum, default_value = "damage")]
    pub task: Task,
    /// A mask PNG or a directory of predictions named like `infer` writes them.
    #[arg(long)]
    pub pred: PathBuf,
    /// A mask PNG or a dataset directory.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn invalid(msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow!("{msg}").context(Invalid)
}

fn require(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| invalid(format!("no {what} given (flag or config)")))
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// 2 for validation problems, 3 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        return 2;
    }
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<floodsight_core::Error>() {
            return if matches!(c, floodsight_core::Error::Divergence { .. }) { 3 } else { 2 };
        }
        if cause.is::<serde_json::Error>() || cause.is::<csv::Error>() || cause.is::<geojson::Error>() {
            return 2;
        }
    }
    3
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
        c.synth.seed = s;
    }
    if let Some(w) = cli.workers {
        c.workers = Some(w);
    }
    if let Some(p) = cli.precision {
        c.aggregation = AggregationLevel::Usng { precision: p };
    }
    c.validate()?;
    Ok(c)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers()).build().context("starting worker pool")?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Infer(a) => cmd_infer(&cfg, a),
        Command::Assess(a) => cmd_assess(&cfg, a),
        Command::Aggregate(a) => cmd_aggregate(&cfg, a, cli.precision.is_some()),
        Command::Score(a) => cmd_score(a),
    })
}

pub fn cmd_synth(cfg: &mut PipelineConfig, a: SynthArgs) -> Result<()> {
    if let Some(n) = a.samples {
        cfg.synth.n_samples = n;
    }
    if let Some(s) = a.image_size {
        cfg.synth.image_size = s;
    }
    cfg.synth.validate().context(Invalid)?;
    let out = require(a.out.or(cfg.paths.data.clone()), "output directory (--out)")?;
    let s = &cfg.synth;
    create_dir(&out.join("damage"))?;
    create_dir(&out.join("flood"))?;
    let damage: Vec<DamageEntry> = (0..s.n_samples)
        .into_par_iter()
        .map(|i| -> Result<DamageEntry> {
            let (pre, post, truth) = generate_damage_pair(s, i)?;
            let n = scene_name(i);
            let e = DamageEntry {
                pre: format!("damage/{n}_pre.tif").into(),
                post: format!("damage/{n}_post.tif").into(),
                mask: Some(format!("damage/{n}_damage.png").into()),
                name: n,
            };
            write_geotiff(&out.join(&e.pre), &pre)?;
            write_geotiff(&out.join(&e.post), &post)?;
            write_mask_png(&out.join(e.mask.as_ref().unwrap()), &truth)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let flood: Vec<FloodEntry> = (0..s.n_samples)
        .into_par_iter()
        .map(|i| -> Result<FloodEntry> {
            let (rgb, hand, truth) = generate_flood_scene(s, i)?;
            let n = scene_name(i);
            let e = FloodEntry {
                rgb: format!("flood/{n}_rgb.tif").into(),
                hand: Some(format!("flood/{n}_hand.tif").into()),
                mask: Some(format!("flood/{n}_mask.png").into()),
                name: n,
            };
            write_geotiff(&out.join(&e.rgb), &rgb)?;
            write_geotiff(&out.join(e.hand.as_ref().unwrap()), &hand)?;
            write_mask_png(&out.join(e.mask.as_ref().unwrap()), &truth)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let region = synth_region(s)?;
    write_zhvi_csv(&out.join("zhvi.csv"), &region.zhvi)?;
    write_regions(&out.join("zips.geojson"), &region.zips, "zip")?;
    write_regions(&out.join("counties.geojson"), &region.counties, "county")?;
    let m = Manifest {
        synth: Some(s.clone()),
        damage,
        flood,
        zhvi_csv: Some("zhvi.csv".into()),
        zips_geojson: Some("zips.geojson".into()),
        counties_geojson: Some("counties.geojson".into()),
        ..Manifest::new()
    };
    m.write(&out)?;
    log::info!("wrote {} damage pairs and {} flood scenes to {}", m.damage.len(), m.flood.len(), out.display());
    Ok(())
}

fn split<T>(items: Vec<T>, val_fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n - n_val == 0 {
        return Err(invalid(format!("{n} labelled samples leave nothing to train on")));
    }
    let mut train = items;
    let val = train.split_off(n - n_val);
    Ok((train, val))
}

/// Segmentation input: RGB, plus HAND resampled onto the RGB grid when the
/// model takes four channels.
fn seg_input(rgb: &GeoRaster, hand: Option<&GeoRaster>, in_channels: usize, name: &str) -> Result<GeoRaster> {
    Ok(match (in_channels, hand) {
        (4, Some(h)) => align_and_stack_hand(rgb, h, Resampling::Bilinear)?,
        (4, None) => return Err(invalid(format!("{name}: the model needs a HAND raster"))),
        _ => rgb.select_channels(&["R", "G", "B"])?,
    })
}

fn history_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    (dir.join(format!("{stem}.history.csv")), dir.join(format!("{stem}.history.json")))
}

pub fn cmd_train(cfg: &mut PipelineConfig, a: TrainArgs) -> Result<()> {
    let data = require(a.data.or(cfg.paths.data.clone()), "dataset (--data)")?;
    let out = require(a.out.or(cfg.paths.checkpoint.clone()), "checkpoint path (--out)")?;
    let epochs = a.epochs.unwrap_or(cfg.training.epochs);
    let manifest = open_dataset(&data)?;
    let mut loss = cfg.loss.clone();
    let (history, class_names, ckpt) = match a.task {
        Task::Damage => {
            let items = manifest.damage.iter().filter(|e| e.mask.is_some()).map(load_damage).collect::<Result<Vec<_>>>()?;
            let (tr, va) = split(items, cfg.training.val_fraction)?;
            let stats = compute_stats(tr.iter().flat_map(|d| [&d.pre, &d.post]))?;
            let mask = |d: &crate::dataset::DamageItem| d.mask.clone().expect("filtered on mask");
            if cfg.training.class_weights {
                loss.class_weights = compute_class_weights(tr.iter().map(|d| d.mask.as_ref().unwrap()), cfg.damage.num_classes);
            }
            let mk = |v: &[crate::dataset::DamageItem]| -> Result<Vec<Sample<f32>>> {
                v.iter().map(|d| Ok(damage_sample(&d.pre, &d.post, &mask(d), Some(&stats))?)).collect()
            };
            let (trs, vas) = (mk(&tr)?, mk(&va)?);
            let plan = build_sampling_plan(&trs.iter().map(|s| s.classes()).collect::<Vec<_>>(), cfg.training.oversample_k, cfg.seed);
            let mut m: DualUNetModel<f32> = build_dual_unet(cfg.damage.clone(), cfg.seed)?;
            log::info!("damage model: {} parameters, {} training draws per epoch", m.param_count(), plan.len());
            let h = train(&mut m, &trs, &vas, &plan, &loss, &cfg.optimizer, epochs, cfg.seed)?;
            m.stats = Some(stats);
            let names = floodsight_core::DamageLevel::ALL.iter().map(|l| l.name().to_string()).collect();
            (h, names, Checkpoint::from_damage(&m))
        }
        Task::Segment => {
            let seg = cfg.seg_config();
            let items = manifest.flood.iter().filter(|e| e.mask.is_some()).map(load_flood).collect::<Result<Vec<_>>>()?;
            let inputs = items
                .into_iter()
                .map(|f| Ok((seg_input(&f.rgb, f.hand.as_ref(), seg.in_channels, &f.name)?, f.mask.expect("filtered on mask"))))
                .collect::<Result<Vec<_>>>()?;
            let (tr, va) = split(inputs, cfg.training.val_fraction)?;
            let stats = compute_stats(tr.iter().map(|(r, _)| r))?;
            if cfg.training.class_weights {
                loss.class_weights = compute_class_weights(tr.iter().map(|(_, m)| m), seg.num_classes);
            }
            let mk = |v: &[(GeoRaster, ClassMask)]| -> Result<Vec<Sample<f32>>> { v.iter().map(|(r, m)| Ok(segmentation_sample(r, m, Some(&stats))?)).collect() };
            let (trs, vas) = (mk(&tr)?, mk(&va)?);
            // the minor/major repeat rule is specific to damage labels
            let plan = build_sampling_plan(&trs.iter().map(|s| s.classes()).collect::<Vec<_>>(), 1, cfg.seed);
            let mut m: SegModel<f32> = build_segmentation_unet(seg.clone(), cfg.seed)?;
            log::info!("segmentation model: {} parameters, {} channels", m.param_count(), seg.in_channels);
            let h = train(&mut m, &trs, &vas, &plan, &loss, &cfg.optimizer, epochs, cfg.seed)?;
            m.stats = Some(stats);
            (h, seg.class_names.clone(), Checkpoint::from_segment(&m))
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_checkpoint(&out, &ckpt)?;
    let (csv_path, json_path) = history_paths(&out);
    write_history_csv(&csv_path, &history, &class_names)?;
    write_json_atomic(&json_path, &history)?;
    log_history(&history);
    Ok(())
}

fn log_history(h: &History) {
    if let Some(e) = h.epochs.last() {
        log::info!("epoch {}: loss {:.4}, validation accuracy {:?}", e.epoch, e.loss, e.val_accuracy);
    }
}

/// Inference tile edge: the configured size, but no larger than the image
/// itself, in multiples of the network's downsampling factor.
pub fn inference_tile_size(configured: usize, width: usize, height: usize, depth: usize) -> usize {
    let m = 1usize << depth;
    let image = width.max(height).div_ceil(m) * m;
    let cap = (configured / m).max(1) * m;
    cap.min(image)
}

fn tiled_predict(inputs: &[&GeoRaster], tile: usize, f: impl Fn(&[&GeoRaster]) -> Result<ClassMask> + Sync) -> Result<ClassMask> {
    let sets = inputs.iter().map(|r| tile_raster(r, tile, 0.0)).collect::<floodsight_core::Result<Vec<_>>>()?;
    let n = sets[0].tiles.len();
    let masks = (0..n)
        .into_par_iter()
        .map(|i| {
            let tiles: Vec<&GeoRaster> = sets.iter().map(|s| &s.tiles[i]).collect();
            f(&tiles)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reassemble_mask(&sets[0], &masks)?)
}

pub fn damage_mask_name(scene: &str) -> String {
    format!("{scene}_damage.png")
}

pub fn segment_mask_name(scene: &str) -> String {
    format!("{scene}_mask.png")
}

fn file_stem(p: &Path) -> String {
    let s = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    s.strip_suffix("_pre_disaster").or_else(|| s.strip_suffix("_pre")).or_else(|| s.strip_suffix("_rgb")).unwrap_or(&s).to_string()
}

pub fn cmd_infer(cfg: &PipelineConfig, a: InferArgs) -> Result<()> {
    let ckpt_path = require(a.checkpoint.or(cfg.paths.checkpoint.clone()), "checkpoint (--checkpoint)")?;
    require_file(&ckpt_path)?;
    let out = require(a.out.or(cfg.paths.output.clone()), "output directory (--out)")?;
    let tile_cfg = a.tile_size.unwrap_or(cfg.tile_size);
    if tile_cfg == 0 {
        return Err(invalid("tile size must be >= 1"));
    }
    let model = read_checkpoint(&ckpt_path).context(Invalid)?.into_model().context(Invalid)?;
    let from_data = a.data.is_some() || (a.pre.is_none() && a.image.is_none());
    let manifest = if from_data {
        open_dataset(&require(a.data.or(cfg.paths.data.clone()), "inputs (--data, --pre/--post or --image)")?)?
    } else {
        Manifest::new()
    };
    create_dir(&out)?;
    match (a.task, model) {
        (Task::Damage, LoadedModel::Damage(m)) => {
            let entries = match (a.pre, a.post) {
                (Some(pre), Some(post)) => {
                    require_file(&pre)?;
                    require_file(&post)?;
                    vec![DamageEntry { name: file_stem(&pre), pre, post, mask: None }]
                }
                _ => manifest.damage,
            };
            if entries.is_empty() {
                return Err(invalid("no damage inputs"));
            }
            for e in &entries {
                let d = load_damage(e)?;
                if !d.pre.same_grid(&d.post) || d.pre.crs != d.post.crs {
                    return Err(anyhow::Error::from(floodsight_core::Error::Alignment(format!("{}: pre and post images are not on the same grid", e.name))));
                }
                let t = inference_tile_size(tile_cfg, d.pre.width(), d.pre.height(), m.config.depth);
                let mask = tiled_predict(&[&d.pre, &d.post], t, |tiles| Ok(m.predict_damage(tiles[0], tiles[1])?.into_inner()))?;
                write_mask_png(&out.join(damage_mask_name(&e.name)), &mask)?;
                log::info!("{}: {}x{} in {t}-pixel tiles", e.name, mask.width(), mask.height());
            }
        }
        (Task::Segment, LoadedModel::Segment(m)) => {
            let entries = match a.image {
                Some(img) => {
                    require_file(&img)?;
                    if let Some(h) = &a.hand {
                        require_file(h)?;
                    }
                    vec![FloodEntry { name: file_stem(&img), rgb: img, hand: a.hand, mask: None }]
                }
                None => manifest.flood,
            };
            if entries.is_empty() {
                return Err(invalid("no imagery inputs"));
            }
            let water = m.config.class_index("water").ok_or_else(|| invalid("the model has no `water` class"))? as u8;
            for e in &entries {
                let f = load_flood(e)?;
                let input = seg_input(&f.rgb, f.hand.as_ref(), m.config.in_channels, &e.name)?;
                let t = inference_tile_size(tile_cfg, input.width(), input.height(), m.config.depth);
                let mask = tiled_predict(&[&input], t, |tiles| Ok(m.segment(tiles[0])?.mask))?;
                write_mask_png(&out.join(segment_mask_name(&e.name)), &mask)?;
                let extent = extract_flood_extent(&mask, water, &input.geotransform, &input.crs)?;
                write_geotiff(&out.join(format!("{}_water.tif", e.name)), &extent.water)?;
                write_flood_lines(&out.join(format!("{}_flood_lines.geojson", e.name)), &extent, &e.name)?;
                log::info!("{}: {} water pixels, {} boundary loops", e.name, extent.water_pixels(), extent.boundaries.len());
            }
        }
        (t, _) => return Err(invalid(format!("checkpoint {} does not hold a {t:?} model", ckpt_path.display()))),
    }
    Ok(())
}

fn mask_files(p: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    if p.is_file() {
        let name = p.file_name().unwrap().to_string_lossy();
        return Ok(vec![(name.strip_suffix(suffix).unwrap_or(&file_stem(p)).to_string(), p.to_path_buf())]);
    }
    if !p.is_dir() {
        return Err(invalid(format!("{} does not exist", p.display())));
    }
    let mut out: Vec<(String, PathBuf)> = std::fs::read_dir(p)
        .with_context(|| format!("listing {}", p.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let f = e.file_name().into_string().ok()?;
            Some((f.strip_suffix(suffix)?.to_string(), e.path()))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn cmd_assess(cfg: &PipelineConfig, a: AssessArgs) -> Result<()> {
    let zhvi_path = require(a.zhvi.or(cfg.paths.zhvi_csv.clone()), "price table (--zhvi)")?;
    let zips_path = require(a.zips.or(cfg.paths.zips_geojson.clone()), "zip polygons (--zips)")?;
    let counties_path = a.counties.or(cfg.paths.counties_geojson.clone());
    let out = require(a.out.or(cfg.paths.output.clone().map(|o| o.join("buildings.geojson"))), "output path (--out)")?;
    for p in [Some(&zhvi_path), Some(&zips_path), counties_path.as_ref()].into_iter().flatten() {
        require_file(p)?;
    }
    let masks = mask_files(&a.masks, "_damage.png")?;
    if masks.is_empty() {
        return Err(invalid(format!("no *_damage.png masks in {}", a.masks.display())));
    }
    let zhvi = read_zhvi_csv(&zhvi_path, &cfg.zhvi_vintage).context(Invalid)?;
    let zips = read_regions(&zips_path, &ZIP_KEYS).context(Invalid)?;
    let counties = counties_path.as_deref().map(|p| read_regions(p, &COUNTY_KEYS)).transpose().context(Invalid)?;
    let mut all = Vec::new();
    for (scene, path) in masks {
        let mask = read_mask_png(&path).context(Invalid)?;
        let georef = mask.georef.clone().ok_or_else(|| invalid(format!("{}: mask has no georeference", path.display())))?;
        let crs = Crs::parse(&georef.crs)?;
        let gsd = gsd_feet(&georef.transform, crs).ok_or_else(|| invalid(format!("{}: needs square pixels in a UTM CRS", path.display())))?;
        let width = mask.width();
        let mask = DamageMask::try_from(mask)?;
        let mut buildings = extract_buildings(&mask, &georef.transform, crs, gsd)?;
        let report = assess_buildings(&mut buildings, Some(&zips), counties.as_ref(), &zhvi, &cfg.cost)?;
        log::info!("{scene}: {report:?}");
        for b in buildings {
            let outline = building_outline(&b, width, &georef)?;
            all.push(AssessedBuilding { scene: scene.clone(), record: b, outline });
        }
    }
    write_buildings(&out, &all)?;
    log::info!("{} buildings, {} cents", all.len(), all.iter().filter_map(|a| a.record.cost_cents).sum::<u64>());
    Ok(())
}

pub fn cmd_aggregate(cfg: &PipelineConfig, a: AggregateArgs, precision_flag: bool) -> Result<()> {
    require_file(&a.buildings)?;
    let level = match (a.level, cfg.aggregation) {
        (Some(Level::Zip), _) => AggregationLevel::Zip,
        (Some(Level::County), _) => AggregationLevel::County,
        (Some(Level::Usng), AggregationLevel::Usng { precision }) => AggregationLevel::Usng { precision },
        (Some(Level::Usng), _) => AggregationLevel::Usng { precision: 2 },
        (None, l) => l,
    };
    if precision_flag && !matches!(level, AggregationLevel::Usng { .. }) {
        return Err(invalid("--precision applies to USNG aggregation only"));
    }
    let out = require(a.out.or(cfg.paths.output.clone().map(|o| o.join("summary.geojson"))), "output path (--out)")?;
    let buildings = read_buildings(&a.buildings).context(Invalid)?;
    let records: Vec<_> = buildings.into_iter().map(|b| b.record).collect();
    let summary = aggregate(&records, level);
    let regions_path = a.regions.or_else(|| match level {
        AggregationLevel::Zip => cfg.paths.zips_geojson.clone(),
        AggregationLevel::County => cfg.paths.counties_geojson.clone(),
        AggregationLevel::Usng { .. } => None,
    });
    let regions: Option<RegionIndex> = match (&regions_path, level) {
        (Some(p), AggregationLevel::Zip) => Some(read_regions(p, &ZIP_KEYS).context(Invalid)?),
        (Some(p), AggregationLevel::County) => Some(read_regions(p, &COUNTY_KEYS).context(Invalid)?),
        _ => None,
    };
    write_summary_geojson(&out, &summary, regions.as_ref())?;
    write_summary_csv(&out.with_extension("csv"), &summary)?;
    log::info!("{} {} buckets, {} cents", summary.buckets.len(), level.name(), summary.grand_total().total_cost_cents);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ClassScore {
    f1: f64,
    iou: f64,
}

#[derive(Debug, Serialize)]
struct SegmentScore {
    pixel_accuracy: f64,
    pixels: u64,
    classes: BTreeMap<String, ClassScore>,
}

#[derive(Debug, Serialize)]
struct ScoreOutput<R: Serialize> {
    masks: usize,
    #[serde(flatten)]
    report: R,
}

fn truth_masks(p: &Path, task: Task) -> Result<Vec<(String, PathBuf)>> {
    if p.is_file() {
        return Ok(vec![(String::new(), p.to_path_buf())]);
    }
    let m = open_dataset(p)?;
    Ok(match task {
        Task::Damage => m.damage.into_iter().filter_map(|e| Some((e.name, e.mask?))).collect(),
        Task::Segment => m.flood.into_iter().filter_map(|e| Some((e.name, e.mask?))).collect(),
    })
}

pub fn cmd_score(a: ScoreArgs) -> Result<()> {
    let truth = truth_masks(&a.truth, a.task)?;
    let pairs: Vec<(PathBuf, PathBuf)> = if a.pred.is_file() {
        if truth.len() != 1 {
            return Err(invalid("a single prediction needs a single truth mask"));
        }
        vec![(a.pred.clone(), truth[0].1.clone())]
    } else {
        if !a.pred.is_dir() {
            return Err(invalid(format!("{} does not exist", a.pred.display())));
        }
        truth
            .into_iter()
            .map(|(name, t)| {
                let pname = match a.task {
                    Task::Damage => damage_mask_name(&name),
                    Task::Segment => segment_mask_name(&name),
                };
                let p = a.pred.join(pname);
                if p.exists() {
                    Ok((p, t))
                } else {
                    Err(invalid(format!("no prediction {} for truth {}", p.display(), t.display())))
                }
            })
            .collect::<Result<_>>()?
    };
    if pairs.is_empty() {
        return Err(invalid("no truth masks to score against"));
    }
    let masks = pairs
        .iter()
        .map(|(p, t)| {
            let (p, t) = (read_mask_png(p)?, read_mask_png(t)?);
            if !p.same_shape(&t) {
                bail!("prediction and truth differ in size");
            }
            Ok((p, t))
        })
        .collect::<Result<Vec<_>>>()
        .context(Invalid)?;
    let json = match a.task {
        Task::Damage => serde_json::to_value(ScoreOutput { masks: masks.len(), report: score_masks(masks.iter().map(|(p, t)| (p, t)))? })?,
        Task::Segment => {
            let names = floodsight_core::nn::DEFAULT_SEMANTIC_CLASSES;
            let mut cm = floodsight_core::metrics::ConfusionMatrix::new(names.len());
            for (p, t) in &masks {
                cm.merge(&confusion(p, t, names.len())?)?;
            }
            let f = f1_per_class(&cm);
            let classes = names.iter().enumerate().map(|(i, n)| (n.to_string(), ClassScore { f1: f[i], iou: iou(&cm, i) })).collect();
            serde_json::to_value(ScoreOutput { masks: masks.len(), report: SegmentScore { pixel_accuracy: cm.accuracy(), pixels: cm.total(), classes } })?
        }
    };
    match &a.out {
        Some(p) => write_json_atomic(p, &json)?,
        None => println!("{}", serde_json::to_string_pretty(&json)?),
    }
    Ok(())
}
