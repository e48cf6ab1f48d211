use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::layers::{Conv, ParamBuilder};
use super::unet::{Decoder, Encoder, EncoderKind};
use super::{argmax, softmax, LossFn, Network, Scalar, Tensor};
use crate::error::{invalid, Result};
use crate::mask::{ClassMask, GeoRef};
use crate::raster::{normalize, ChannelStats, GeoRaster};

pub const DEFAULT_SEMANTIC_CLASSES: [&str; 5] = ["background", "water", "vegetation", "road", "building"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegUNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub encoder_kind: EncoderKind,
    pub class_names: Vec<String>,
}

impl Default for SegUNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            num_classes: 5,
            depth: 4,
            base_width: 16,
            encoder_kind: EncoderKind::Generic,
            class_names: DEFAULT_SEMANTIC_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SegUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 && self.in_channels != 4 {
            return Err(invalid!("in_channels must be 3 or 4, got {}", self.in_channels));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(invalid!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.depth < 2 {
            return Err(invalid!("depth must be >= 2, got {}", self.depth));
        }
        if self.base_width < 1 {
            return Err(invalid!("base_width must be >= 1"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(invalid!("{} class names for {} classes", self.class_names.len(), self.num_classes));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.encoder_kind.width(self.base_width, l)).collect()
    }

    /// Closed-form parameter count (must equal the built model's).
    pub fn param_count(&self) -> usize {
        let widths = self.widths();
        Encoder::param_count(self.in_channels, self.depth, self.base_width, self.encoder_kind)
            + Decoder::param_count(
                widths[self.depth],
                &widths,
                &widths[..self.depth],
                self.encoder_kind.convs_per_level(),
                self.num_classes,
            )
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

/// Single-input U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel<T = f32> {
    pub config: SegUNetConfig,
    encoder: Encoder,
    decoder: Decoder,
    params: Vec<T>,
    /// Normalization applied by [`SegModel::segment`] before the forward pass.
    pub stats: Option<ChannelStats>,
}

/// Output of [`SegModel::segment`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: ClassMask,
    /// Channels-first class probabilities (`num_classes x H x W`).
    pub probabilities: Vec<f32>,
}

pub fn build_segmentation_unet<T: Scalar>(config: SegUNetConfig, seed: u64) -> Result<SegModel<T>> {
    SegModel::build(config, seed)
}

impl<T: Scalar> SegModel<T> {
    fn layout(config: &SegUNetConfig) -> (Encoder, Decoder, ParamBuilder) {
        let mut pb = ParamBuilder::new();
        let encoder = Encoder::new(&mut pb, config.in_channels, config.depth, config.base_width, config.encoder_kind);
        let widths = encoder.widths.clone();
        let decoder = Decoder::new(
            &mut pb,
            widths[config.depth],
            &widths,
            widths[..config.depth].to_vec(),
            config.encoder_kind.convs_per_level(),
            config.num_classes,
        );
        (encoder, decoder, pb)
    }

    pub fn build(config: SegUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (encoder, decoder, pb) = Self::layout(&config);
        let params = pb.initialize(seed);
        Ok(Self { config, encoder, decoder, params, stats: None })
    }

    /// Rebuild a model from stored parameters.
    pub fn from_params(config: SegUNetConfig, params: Vec<T>, stats: Option<ChannelStats>) -> Result<Self> {
        config.validate()?;
        let (encoder, decoder, pb) = Self::layout(&config);
        if params.len() != pb.len() {
            return Err(invalid!("checkpoint holds {} parameters, config needs {}", params.len(), pb.len()));
        }
        Ok(Self { config, encoder, decoder, params, stats })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// The first convolution (the only layer that sees the raw input channels).
    pub fn first_conv(&self) -> Conv {
        self.encoder.levels[0].convs[0]
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
            stats: self.stats.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(invalid!("model expects {} channels, got {}", self.config.in_channels, x.c));
        }
        let m = 1usize << self.config.depth;
        if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(invalid!("input {}x{} is not divisible by {m}", x.h, x.w));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let enc = self.encoder.forward(&self.params, x);
        let (logits, _) = self.decoder.forward(&self.params, enc.bottom.clone(), &enc.skips);
        Ok(logits)
    }

    /// Normalize (when statistics are attached), run the network and take the
    /// per-pixel argmax of the class probabilities.
    pub fn segment(&self, tile: &GeoRaster) -> Result<Segmentation> {
        let input = match &self.stats {
            Some(s) => normalize(tile, s)?,
            None => tile.clone(),
        };
        let logits = self.forward(&Tensor::from_raster(&input))?;
        let probs = softmax(&logits);
        let mask = ClassMask::new(tile.width(), tile.height(), argmax(&probs))?
            .with_georef(Some(GeoRef { transform: tile.geotransform, crs: tile.crs.clone() }));
        Ok(Segmentation { mask, probabilities: probs.data.iter().map(|v| v.as_f64() as f32).collect() })
    }
}

impl<T: Scalar> Network<T> for SegModel<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_count(&self) -> usize {
        1
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn logits(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match inputs {
            [x] => self.forward(x),
            _ => Err(invalid!("segmentation model takes one input, got {}", inputs.len())),
        }
    }

    fn backprop(&self, inputs: &[&Tensor<T>], loss: &mut LossFn<'_, T>, grads: &mut [T]) -> Result<T> {
        let [x] = inputs else {
            return Err(invalid!("segmentation model takes one input, got {}", inputs.len()));
        };
        self.check_input(x)?;
        if grads.len() != self.params.len() {
            return Err(invalid!("gradient buffer has {} entries, need {}", grads.len(), self.params.len()));
        }
        let enc = self.encoder.forward(&self.params, x);
        let (logits, dcache) = self.decoder.forward(&self.params, enc.bottom.clone(), &enc.skips);
        let (value, dlogits) = loss(&logits)?;
        let (d_bottom, d_skips) = self.decoder.backward(&self.params, grads, &dcache, &logits, dlogits);
        self.encoder.backward(&self.params, grads, &enc, d_skips, d_bottom);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;
    use alloc::vec;
    use proptest::prelude::*;

    fn cfg(in_channels: usize, depth: usize, base_width: usize, num_classes: usize) -> SegUNetConfig {
        SegUNetConfig {
            in_channels,
            num_classes,
            depth,
            base_width,
            encoder_kind: EncoderKind::Generic,
            class_names: Vec::new(),
        }
    }

    fn tile(c: usize, size: usize) -> GeoRaster {
        let names = ["R", "G", "B", "HAND"][..c].iter().map(|s| s.to_string()).collect();
        let px = (0..c * size * size).map(|i| ((i * 31) % 97) as f32 / 97.0).collect();
        let gt = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        GeoRaster::new(size, size, px, gt, "EPSG:32615", names).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: SegModel<f32> = build_segmentation_unet(cfg(4, 3, 4, 5), 9).unwrap();
        let b: SegModel<f32> = build_segmentation_unet(cfg(4, 3, 4, 5), 9).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn hand_channel_adds_only_first_layer_fan_in() {
        for kind in [EncoderKind::Generic, EncoderKind::CompoundScaled] {
            let mut c3 = cfg(3, 4, 16, 5);
            c3.encoder_kind = kind;
            let c4 = SegUNetConfig { in_channels: 4, ..c3.clone() };
            let a: SegModel<f32> = build_segmentation_unet(c3.clone(), 0).unwrap();
            let b: SegModel<f32> = build_segmentation_unet(c4.clone(), 0).unwrap();
            // one extra input channel: 3x3 kernel taps for each first-level filter
            let first_width = kind.width(16, 0);
            assert_eq!(b.param_count() - a.param_count(), first_width * 9);
            assert_eq!(a.param_count(), c3.param_count());
            assert_eq!(b.param_count(), c4.param_count());
        }
    }

    #[test]
    fn smallest_model_runs() {
        let m: SegModel<f32> = build_segmentation_unet(cfg(3, 2, 1, 2), 1).unwrap();
        let s = m.segment(&tile(3, 4)).unwrap();
        assert_eq!((s.mask.width(), s.mask.height()), (4, 4));
        assert!(s.mask.data().iter().all(|&v| v < 2));
    }

    #[test]
    fn output_shape_and_probabilities() {
        let m: SegModel<f32> = build_segmentation_unet(cfg(4, 4, 4, 5), 3).unwrap();
        let s = m.segment(&tile(4, 64)).unwrap();
        assert_eq!((s.mask.width(), s.mask.height()), (64, 64));
        let n = 64 * 64;
        for i in 0..n {
            let sum: f32 = (0..5).map(|k| s.probabilities[k * n + i]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m: SegModel<f32> = build_segmentation_unet(cfg(4, 3, 2, 5), 3).unwrap();
        assert!(m.segment(&tile(3, 16)).is_err());
        assert!(m.segment(&tile(4, 12)).is_err());
        assert!(build_segmentation_unet::<f32>(cfg(5, 3, 2, 5), 0).is_err());
        assert!(build_segmentation_unet::<f32>(cfg(3, 1, 2, 5), 0).is_err());
        assert!(build_segmentation_unet::<f32>(cfg(3, 2, 2, 1), 0).is_err());
    }

    #[test]
    fn zeroed_hand_weights_make_side_channel_inert() {
        let mut m: SegModel<f64> = build_segmentation_unet(cfg(4, 2, 3, 5), 5).unwrap();
        let conv = m.first_conv();
        let w = conv.weight.of_mut(m.params_mut());
        for co in 0..conv.cout {
            for tap in 0..9 {
                w[(co * 4 + 3) * 9 + tap] = 0.0;
            }
        }
        let with_hand = tile(4, 8);
        let mut zero_hand = with_hand.clone();
        zero_hand.channel_mut(3).fill(0.0);
        let a = m.forward(&Tensor::from_raster(&with_hand)).unwrap();
        let b = m.forward(&Tensor::from_raster(&zero_hand)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shape_contract(hm in 1usize..5, wm in 1usize..5, depth in 2usize..4) {
            let m: SegModel<f32> = build_segmentation_unet(cfg(3, depth, 2, 3), 0).unwrap();
            let (h, w) = (hm << depth, wm << depth);
            let x = Tensor::<f32>::from_vec(3, h, w, vec![0.5; 3 * h * w]).unwrap();
            let out = m.forward(&x).unwrap();
            prop_assert_eq!((out.c, out.h, out.w), (3, h, w));
        }
    }
}
