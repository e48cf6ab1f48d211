//! Pipeline configuration: one JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use floodsight_core::financial::CostModel;
use floodsight_core::nn::{DualUNetConfig, SegUNetConfig};
use floodsight_core::synth::SynthConfig;
use floodsight_core::training::{LossConfig, OptimizerConfig};
use floodsight_core::usng::AggregationLevel;
use serde::{Deserialize, Serialize};

use crate::Invalid;

/// File locations. Relative entries are resolved against the directory of
/// the config file that named them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory: a `manifest.json` written by `synth`, or an
    /// xBD-style tree.
    pub data: Option<PathBuf>,
    pub zhvi_csv: Option<PathBuf>,
    pub zips_geojson: Option<PathBuf>,
    pub counties_geojson: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.zhvi_csv, &mut self.zips_geojson, &mut self.counties_geojson, &mut self.checkpoint, &mut self.output]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Repeats of samples that contain minor or major damage.
    pub oversample_k: usize,
    /// Trailing share of the dataset held out for validation.
    pub val_fraction: f64,
    /// Inverse-frequency class weights for the cross-entropy term.
    pub class_weights: bool,
    /// Feed HAND as a fourth channel to the segmentation model.
    pub use_hand: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { epochs: 20, oversample_k: 4, val_fraction: 0.2, class_weights: true, use_hand: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Inference threads; `None` uses every processor.
    pub workers: Option<usize>,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub segment: SegUNetConfig,
    pub damage: DualUNetConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    /// Largest inference tile edge in pixels.
    pub tile_size: usize,
    pub cost: CostModel,
    pub zhvi_vintage: String,
    pub aggregation: AggregationLevel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            workers: None,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            segment: SegUNetConfig { depth: 3, ..SegUNetConfig::default() },
            damage: DualUNetConfig { depth: 3, ..DualUNetConfig::default() },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            tile_size: 1024,
            cost: CostModel::default(),
            zhvi_vintage: "ZHVI".into(),
            aggregation: AggregationLevel::Usng { precision: 2 },
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).context(Invalid)?;
        let mut c: PipelineConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display())).context(Invalid)?;
        c.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let run = || -> floodsight_core::Result<()> {
            self.synth.validate()?;
            self.segment.validate()?;
            self.damage.validate()?;
            self.loss.validate(self.damage.num_classes)?;
            self.optimizer.validate()?;
            self.cost.validate()?;
            Ok(())
        };
        run().context(Invalid)?;
        let bad = |m: &str| Err(anyhow::anyhow!("{m}")).context(Invalid);
        if self.tile_size == 0 {
            return bad("tile_size must be >= 1");
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1");
        }
        if !(0.0..1.0).contains(&self.training.val_fraction) {
            return bad("training.val_fraction must be in [0, 1)");
        }
        if self.training.oversample_k == 0 {
            return bad("training.oversample_k must be >= 1");
        }
        if let AggregationLevel::Usng { precision } = self.aggregation {
            if precision > 5 {
                return bad("USNG precision must be 0..=5");
            }
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn seg_config(&self) -> SegUNetConfig {
        let mut c = self.segment.clone();
        c.in_channels = if self.training.use_hand { 4 } else { 3 };
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), c);
    }

    #[test]
    fn partial_file_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"seed": 11, "paths": {"data": "ds", "zhvi_csv": "/abs/z.csv"}, "aggregation": {"kind": "zip"}}"#).unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.paths.data.unwrap(), dir.path().join("ds"));
        assert_eq!(c.paths.zhvi_csv.unwrap(), PathBuf::from("/abs/z.csv"));
        assert_eq!(c.aggregation, AggregationLevel::Zip);
        assert_eq!(c.training, TrainingConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"sede": 11}"#).unwrap();
        let e = PipelineConfig::load(&p).unwrap_err();
        assert!(e.downcast_ref::<Invalid>().is_some());
    }
}
