//! JSON and CSV artifacts: normalization statistics, model checkpoints,
//! training history, price tables and grid summaries.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use floodsight_core::financial::{PricePerSqft, ZhviTable};
use floodsight_core::nn::{DualUNetConfig, DualUNetModel, Network, SegModel, SegUNetConfig};
use floodsight_core::raster::{ChannelStat, ChannelStats};
use floodsight_core::training::History;
use floodsight_core::usng::GridSummary;
use serde::{Deserialize, Serialize};

use crate::atomic::{write_atomic, write_json_atomic};

pub type StatsFile = BTreeMap<String, ChannelStat>;

pub fn stats_to_file(s: &ChannelStats) -> StatsFile {
    s.entries().into_iter().collect()
}

pub fn stats_from_file(f: &StatsFile) -> Result<ChannelStats> {
    let s = ChannelStats::from_entries(f.iter().map(|(k, v)| (k.as_str(), *v)))?;
    s.validate()?;
    Ok(s)
}

pub fn write_stats(path: &Path, s: &ChannelStats) -> Result<()> {
    write_json_atomic(path, &stats_to_file(s))
}

pub fn read_stats(path: &Path) -> Result<ChannelStats> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let f: StatsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    stats_from_file(&f)
}

/// Which network a checkpoint holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Segment(SegUNetConfig),
    Damage(DualUNetConfig),
}

/// Config, parameters and normalization statistics in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelSpec,
    pub stats: Option<StatsFile>,
    pub params: Vec<f32>,
}

pub enum LoadedModel {
    Segment(SegModel<f32>),
    Damage(DualUNetModel<f32>),
}

impl Checkpoint {
    pub fn from_segment(m: &SegModel<f32>) -> Self {
        Checkpoint {
            format_version: 1,
            model: ModelSpec::Segment(m.config.clone()),
            stats: m.stats.as_ref().map(stats_to_file),
            params: m.params().to_vec(),
        }
    }

    pub fn from_damage(m: &DualUNetModel<f32>) -> Self {
        Checkpoint {
            format_version: 1,
            model: ModelSpec::Damage(m.config.clone()),
            stats: m.stats.as_ref().map(stats_to_file),
            params: m.params().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<LoadedModel> {
        if self.format_version != 1 {
            bail!("unsupported checkpoint version {}", self.format_version);
        }
        let stats = self.stats.as_ref().map(stats_from_file).transpose()?;
        Ok(match self.model {
            ModelSpec::Segment(c) => LoadedModel::Segment(SegModel::from_params(c, self.params, stats)?),
            ModelSpec::Damage(c) => LoadedModel::Damage(DualUNetModel::from_params(c, self.params, stats)?),
        })
    }
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, |f| {
        serde_json::to_writer(std::io::BufWriter::new(f), c)?;
        Ok(())
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(f)).with_context(|| format!("parsing checkpoint {}", path.display()))
}

/// `epoch,loss,val_accuracy,val_f1_<class>...`; run metadata goes to a
/// sibling JSON by the caller.
pub fn write_history_csv(path: &Path, h: &History, class_names: &[String]) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = csv::Writer::from_writer(f);
        let mut header = vec!["epoch".to_string(), "loss".into(), "val_accuracy".into()];
        header.extend(class_names.iter().map(|c| format!("val_f1_{}", c.replace(' ', "_").to_lowercase())));
        w.write_record(&header)?;
        for e in &h.epochs {
            let mut row = vec![e.epoch.to_string(), format!("{:.6}", e.loss), e.val_accuracy.map_or(String::new(), |a| format!("{a:.6}"))];
            row.extend((0..class_names.len()).map(|i| e.val_f1.get(i).map_or(String::new(), |v| format!("{v:.6}"))));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ZhviRow {
    zip: String,
    price_per_sqft_usd: String,
}

pub fn read_zhvi_csv(path: &Path, vintage: &str) -> Result<ZhviTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["zip", "price_per_sqft_usd"] {
        bail!("{}: expected header zip,price_per_sqft_usd", path.display());
    }
    let mut t = ZhviTable::new(vintage);
    for (line, row) in r.deserialize::<ZhviRow>().enumerate() {
        let row = row.with_context(|| format!("{} row {}", path.display(), line + 2))?;
        let price: PricePerSqft = row.price_per_sqft_usd.parse().with_context(|| format!("{} row {}", path.display(), line + 2))?;
        t.insert(row.zip.trim(), price).with_context(|| format!("{} row {}", path.display(), line + 2))?;
    }
    Ok(t)
}

pub fn write_zhvi_csv(path: &Path, t: &ZhviTable) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = csv::Writer::from_writer(f);
        for (zip, price) in t.iter() {
            w.serialize(ZhviRow { zip: zip.to_string(), price_per_sqft_usd: price.to_string() })?;
        }
        w.flush()?;
        Ok(())
    })
}

pub const SUMMARY_HEADER: [&str; 6] = ["cell", "total_cost_usd_cents", "count_no_damage", "count_minor", "count_major", "count_destroyed"];
pub const UNASSIGNED_ROW: &str = "unassigned";

/// Summary rows in lexicographic key order, then an `unassigned` row when
/// any building lacked a key.
pub fn write_summary_csv(path: &Path, s: &GridSummary) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(SUMMARY_HEADER)?;
        let rows = s.buckets.iter().map(|(k, v)| (k.as_str(), v));
        let extra = (s.unassigned.building_total > 0).then_some((UNASSIGNED_ROW, &s.unassigned));
        for (k, t) in rows.chain(extra) {
            let c = t.counts;
            w.write_record([k.to_string(), t.total_cost_cents.to_string(), c[1].to_string(), c[2].to_string(), c[3].to_string(), c[4].to_string()])?;
        }
        w.flush()?;
        Ok(())
    })
}

/// `(key, total_cost_cents, [counts 1..=4])` rows of a summary CSV.
pub fn read_summary_csv(path: &Path) -> Result<Vec<(String, u64, [u64; 4])>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    if r.headers()?.iter().collect::<Vec<_>>() != SUMMARY_HEADER {
        bail!("{}: unexpected header", path.display());
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let n = |i: usize| -> Result<u64> { Ok(row[i].parse()?) };
        out.push((row[0].to_string(), n(1)?, [n(2)?, n(3)?, n(4)?, n(5)?]));
    }
    Ok(out)
}
