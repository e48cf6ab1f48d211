use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::layers::ParamBuilder;
use super::unet::{Decoder, Encoder, EncoderKind, EncoderOutput};
use super::{argmax, LossFn, Network, Scalar, Tensor};
use crate::error::{invalid, Error, Result};
use crate::mask::{DamageMask, GeoRef, NUM_DAMAGE_CLASSES};
use crate::raster::{normalize, ChannelStats, GeoRaster};

/// What the decoder receives at each skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// `post - pre` features.
    #[default]
    Difference,
    /// `pre` features followed by `post - pre`.
    PrePlusDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualUNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub skip_mode: SkipMode,
    pub encoder_kind: EncoderKind,
}

impl Default for DualUNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: NUM_DAMAGE_CLASSES,
            depth: 4,
            base_width: 16,
            skip_mode: SkipMode::Difference,
            encoder_kind: EncoderKind::Generic,
        }
    }
}

impl DualUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 {
            return Err(invalid!("dual U-Net expects 3 input channels, got {}", self.in_channels));
        }
        if self.num_classes != NUM_DAMAGE_CLASSES {
            return Err(invalid!("dual U-Net emits {NUM_DAMAGE_CLASSES} damage classes, got {}", self.num_classes));
        }
        if self.depth < 2 {
            return Err(invalid!("depth must be >= 2, got {}", self.depth));
        }
        if self.base_width < 1 {
            return Err(invalid!("base_width must be >= 1"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.encoder_kind.width(self.base_width, l)).collect()
    }

    fn skip_channels(&self, widths: &[usize]) -> Vec<usize> {
        widths[..self.depth]
            .iter()
            .map(|&w| match self.skip_mode {
                SkipMode::Difference => w,
                SkipMode::PrePlusDifference => 2 * w,
            })
            .collect()
    }

    /// One encoder plus one decoder. The decoder's bottom input is the
    /// concatenation of both bottleneck outputs.
    pub fn param_count(&self) -> usize {
        let widths = self.widths();
        Encoder::param_count(self.in_channels, self.depth, self.base_width, self.encoder_kind)
            + Decoder::param_count(
                2 * widths[self.depth],
                &widths,
                &self.skip_channels(&widths),
                self.encoder_kind.convs_per_level(),
                self.num_classes,
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Pre,
    Post,
}

/// Instrumentation callbacks invoked during the forward pass.
pub trait FeatureHook<T> {
    /// Called once per encoder pass with the parameter slice that pass used.
    fn encoder_pass(&mut self, _branch: Branch, _encoder_params: &[T]) {}
    /// `post - pre` features at `level` (0 = full resolution).
    fn difference_skip(&mut self, _level: usize, _diff: &Tensor<T>) {}
}

pub struct NoHook;

impl<T> FeatureHook<T> for NoHook {}

/// Keeps everything the hook sees. Parameter slices are recorded by address
/// and length, which is what the shared-encoder check compares.
#[derive(Debug, Default)]
pub struct RecordingHook<T> {
    pub passes: Vec<(Branch, usize, usize)>,
    pub differences: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureHook<T> for RecordingHook<T> {
    fn encoder_pass(&mut self, branch: Branch, encoder_params: &[T]) {
        self.passes.push((branch, encoder_params.as_ptr() as usize, encoder_params.len()));
    }

    fn difference_skip(&mut self, _level: usize, diff: &Tensor<T>) {
        self.differences.push(diff.clone());
    }
}

/// Shared-weight siamese encoder with a decoder fed by feature differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualUNetModel<T = f32> {
    pub config: DualUNetConfig,
    encoder: Encoder,
    decoder: Decoder,
    params: Vec<T>,
    pub stats: Option<ChannelStats>,
}

pub fn build_dual_unet<T: Scalar>(config: DualUNetConfig, seed: u64) -> Result<DualUNetModel<T>> {
    DualUNetModel::build(config, seed)
}

struct Fused<T> {
    skips: Vec<Tensor<T>>,
    bottom: Tensor<T>,
}

impl<T: Scalar> DualUNetModel<T> {
    fn layout(config: &DualUNetConfig) -> (Encoder, Decoder, ParamBuilder) {
        let mut pb = ParamBuilder::new();
        let encoder = Encoder::new(&mut pb, config.in_channels, config.depth, config.base_width, config.encoder_kind);
        let widths = encoder.widths.clone();
        let decoder = Decoder::new(
            &mut pb,
            2 * widths[config.depth],
            &widths,
            config.skip_channels(&widths),
            config.encoder_kind.convs_per_level(),
            config.num_classes,
        );
        (encoder, decoder, pb)
    }

    pub fn build(config: DualUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (encoder, decoder, pb) = Self::layout(&config);
        let params = pb.initialize(seed);
        Ok(Self { config, encoder, decoder, params, stats: None })
    }

    pub fn from_params(config: DualUNetConfig, params: Vec<T>, stats: Option<ChannelStats>) -> Result<Self> {
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

    /// The single encoder parameter set used by both branches.
    pub fn encoder_params(&self) -> &[T] {
        self.encoder.params(&self.params)
    }

    pub fn encoder_params_mut(&mut self) -> &mut [T] {
        let r = self.encoder.param_range.clone();
        &mut self.params[r]
    }

    /// Zero the 1x1 classifier, so every logit is exactly 0.
    pub fn zero_head(&mut self) {
        let head = self.decoder.head;
        head.weight.of_mut(&mut self.params).fill(T::zero());
        head.bias.of_mut(&mut self.params).fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> DualUNetModel<U> {
        DualUNetModel {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
            stats: self.stats.clone(),
        }
    }

    fn check_pair(&self, pre: &Tensor<T>, post: &Tensor<T>) -> Result<()> {
        if !pre.same_shape(post) {
            return Err(invalid!(
                "pre {}x{}x{} and post {}x{}x{} differ in shape",
                pre.c,
                pre.h,
                pre.w,
                post.c,
                post.h,
                post.w
            ));
        }
        if pre.c != self.config.in_channels {
            return Err(invalid!("model expects {} channels, got {}", self.config.in_channels, pre.c));
        }
        let m = 1usize << self.config.depth;
        if pre.h == 0 || pre.w == 0 || pre.h % m != 0 || pre.w % m != 0 {
            return Err(invalid!("input {}x{} is not divisible by {m}", pre.h, pre.w));
        }
        Ok(())
    }

    fn encode(
        &self,
        pre: &Tensor<T>,
        post: &Tensor<T>,
        hook: &mut dyn FeatureHook<T>,
    ) -> (EncoderOutput<T>, EncoderOutput<T>, Fused<T>) {
        hook.encoder_pass(Branch::Pre, self.encoder.params(&self.params));
        let a = self.encoder.forward(&self.params, pre);
        hook.encoder_pass(Branch::Post, self.encoder.params(&self.params));
        let b = self.encoder.forward(&self.params, post);
        let mut skips = Vec::with_capacity(self.config.depth);
        for (l, (sa, sb)) in a.skips.iter().zip(&b.skips).enumerate() {
            let diff = sb.sub(sa);
            hook.difference_skip(l, &diff);
            skips.push(match self.config.skip_mode {
                SkipMode::Difference => diff,
                SkipMode::PrePlusDifference => Tensor::concat(&[sa, &diff]),
            });
        }
        let bottom = Tensor::concat(&[&a.bottom, &b.bottom]);
        (a, b, Fused { skips, bottom })
    }

    pub fn forward(&self, pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with_hook(pre, post, &mut NoHook)
    }

    pub fn forward_with_hook(&self, pre: &Tensor<T>, post: &Tensor<T>, hook: &mut dyn FeatureHook<T>) -> Result<Tensor<T>> {
        self.check_pair(pre, post)?;
        let (_, _, fused) = self.encode(pre, post, hook);
        let (logits, _) = self.decoder.forward(&self.params, fused.bottom, &fused.skips);
        Ok(logits)
    }

    /// Per-pixel damage class for an aligned pair. The mask carries the pre
    /// image's georeference.
    pub fn predict_damage(&self, pre: &GeoRaster, post: &GeoRaster) -> Result<DamageMask> {
        if !pre.same_grid(post) || pre.crs != post.crs {
            return Err(Error::Alignment("pre and post rasters are not on the same grid".into()));
        }
        let (pre_n, post_n) = match &self.stats {
            Some(s) => (normalize(pre, s)?, normalize(post, s)?),
            None => (pre.clone(), post.clone()),
        };
        let logits = self.forward(&Tensor::from_raster(&pre_n), &Tensor::from_raster(&post_n))?;
        let mask = DamageMask::new(pre.width(), pre.height(), argmax(&logits))?;
        Ok(mask.with_georef(Some(GeoRef { transform: pre.geotransform, crs: pre.crs.clone() })))
    }
}

impl<T: Scalar> Network<T> for DualUNetModel<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_count(&self) -> usize {
        2
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn logits(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match inputs {
            [pre, post] => self.forward(pre, post),
            _ => Err(invalid!("dual U-Net takes two inputs, got {}", inputs.len())),
        }
    }

    fn backprop(&self, inputs: &[&Tensor<T>], loss: &mut LossFn<'_, T>, grads: &mut [T]) -> Result<T> {
        let [pre, post] = inputs else {
            return Err(invalid!("dual U-Net takes two inputs, got {}", inputs.len()));
        };
        self.check_pair(pre, post)?;
        if grads.len() != self.params.len() {
            return Err(invalid!("gradient buffer has {} entries, need {}", grads.len(), self.params.len()));
        }
        let (a, b, fused) = self.encode(pre, post, &mut NoHook);
        let (logits, cache) = self.decoder.forward(&self.params, fused.bottom, &fused.skips);
        let (value, dlogits) = loss(&logits)?;
        let (d_bottom, d_skips) = self.decoder.backward(&self.params, grads, &cache, &logits, dlogits);

        let wd = a.bottom.c;
        let mut halves = d_bottom.split(&[wd, wd]);
        let d_post_bottom = halves.pop().expect("two halves");
        let d_pre_bottom = halves.pop().expect("two halves");

        let mut d_pre = Vec::with_capacity(d_skips.len());
        let mut d_post = Vec::with_capacity(d_skips.len());
        for (l, ds) in d_skips.into_iter().enumerate() {
            match self.config.skip_mode {
                SkipMode::Difference => {
                    d_pre.push(ds.neg());
                    d_post.push(ds);
                }
                SkipMode::PrePlusDifference => {
                    let w = a.skips[l].c;
                    let mut parts = ds.split(&[w, w]);
                    let d_diff = parts.pop().expect("two parts");
                    let d_direct = parts.pop().expect("two parts");
                    d_pre.push(d_direct.sub(&d_diff));
                    d_post.push(d_diff);
                }
            }
        }
        self.encoder.backward(&self.params, grads, &a, d_pre, d_pre_bottom);
        self.encoder.backward(&self.params, grads, &b, d_post, d_post_bottom);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_segmentation_unet, SegUNetConfig};
    use crate::raster::GeoTransform;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(depth: usize, base_width: usize, skip_mode: SkipMode) -> DualUNetConfig {
        DualUNetConfig { depth, base_width, skip_mode, ..DualUNetConfig::default() }
    }

    fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<T> {
        let data = (0..c * h * w).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    fn raster(size: usize, seed: u64) -> GeoRaster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt = GeoTransform::new(500_000.0, 3_300_000.0, 0.5, -0.5).unwrap();
        let names = ["R", "G", "B"].iter().map(|s| s.to_string()).collect();
        GeoRaster::new(size, size, px, gt, "EPSG:32615", names).unwrap()
    }

    #[test]
    fn deterministic_build() {
        let a: DualUNetModel<f32> = build_dual_unet(cfg(3, 4, SkipMode::Difference), 17).unwrap();
        let b: DualUNetModel<f32> = build_dual_unet(cfg(3, 4, SkipMode::Difference), 17).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn parameter_count_against_single_input_unet() {
        for kind in [EncoderKind::Generic, EncoderKind::CompoundScaled] {
            for mode in [SkipMode::Difference, SkipMode::PrePlusDifference] {
                let dc = DualUNetConfig { encoder_kind: kind, ..cfg(4, 16, mode) };
                let dual: DualUNetModel<f32> = build_dual_unet(dc.clone(), 0).unwrap();
                let seg: crate::nn::SegModel<f32> = build_segmentation_unet(
                    SegUNetConfig {
                        in_channels: 3,
                        num_classes: 5,
                        depth: 4,
                        base_width: 16,
                        encoder_kind: kind,
                        class_names: Vec::new(),
                    },
                    0,
                )
                .unwrap();
                let w: Vec<usize> = (0..=4).map(|l| kind.width(16, l)).collect();
                // deepest up-convolution sees both bottlenecks
                let mut extra = 4 * w[3] * w[4];
                if mode == SkipMode::PrePlusDifference {
                    // first conv of every decoder block sees the pre features too
                    extra += (0..4).map(|l| w[l] * w[l] * 9).sum::<usize>();
                }
                assert_eq!(dual.param_count(), seg.param_count() + extra);
                assert_eq!(dual.param_count(), dc.param_count());
                assert_eq!(
                    dual.encoder_params().len(),
                    Encoder::param_count(3, 4, 16, kind),
                    "exactly one encoder parameter set"
                );
            }
        }
    }

    #[test]
    fn minimal_model_runs_on_16x16() {
        let m: DualUNetModel<f32> = build_dual_unet(cfg(2, 1, SkipMode::Difference), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_tensor(&mut rng, 3, 16, 16);
        let b = random_tensor(&mut rng, 3, 16, 16);
        let out = m.forward(&a, &b).unwrap();
        assert_eq!((out.c, out.h, out.w), (5, 16, 16));
    }

    #[test]
    fn logits_shape_128_depth_4() {
        let m: DualUNetModel<f32> = build_dual_unet(cfg(4, 2, SkipMode::Difference), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, 3, 128, 128);
        let b = random_tensor(&mut rng, 3, 128, 128);
        let out = m.forward(&a, &b).unwrap();
        assert_eq!((out.c, out.h, out.w), (5, 128, 128));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m: DualUNetModel<f32> = build_dual_unet(cfg(2, 2, SkipMode::Difference), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 3, 16, 16);
        let b = random_tensor(&mut rng, 3, 16, 8);
        assert!(matches!(m.forward(&a, &b), Err(Error::InvalidInput(_))));
        let c = random_tensor(&mut rng, 3, 10, 10);
        assert!(m.forward(&c, &c).is_err());
        assert!(build_dual_unet::<f32>(DualUNetConfig { num_classes: 4, ..DualUNetConfig::default() }, 0).is_err());
        assert!(build_dual_unet::<f32>(cfg(1, 2, SkipMode::Difference), 0).is_err());
    }

    #[test]
    fn identical_inputs_zero_differences_and_stable_logits() {
        let m: DualUNetModel<f32> = build_dual_unet(cfg(3, 4, SkipMode::Difference), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, 3, 32, 32);
        let mut hook = RecordingHook::default();
        let first = m.forward_with_hook(&a, &a, &mut hook).unwrap();
        assert_eq!(hook.differences.len(), 3);
        assert!(hook.differences.iter().all(|d| d.data.iter().all(|&v| v == 0.0)));
        assert_eq!(first, m.forward(&a, &a.clone()).unwrap());
    }

    #[test]
    fn swapping_inputs_negates_differences() {
        let m: DualUNetModel<f32> = build_dual_unet(cfg(3, 4, SkipMode::Difference), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&mut rng, 3, 32, 32);
        let b = random_tensor(&mut rng, 3, 32, 32);
        let mut ab = RecordingHook::default();
        let mut ba = RecordingHook::default();
        m.forward_with_hook(&a, &b, &mut ab).unwrap();
        m.forward_with_hook(&b, &a, &mut ba).unwrap();
        for (x, y) in ab.differences.iter().zip(&ba.differences) {
            assert_eq!(x.data, y.neg().data);
        }
    }

    #[test]
    fn both_branches_read_the_same_encoder_slice() {
        let mut m: DualUNetModel<f64> = build_dual_unet(cfg(2, 2, SkipMode::Difference), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&mut rng, 3, 8, 8);
        let b = random_tensor(&mut rng, 3, 8, 8);
        let mut hook = RecordingHook::default();
        m.forward_with_hook(&a, &b, &mut hook).unwrap();
        assert_eq!(hook.passes.len(), 2);
        assert_eq!(hook.passes[0].1, hook.passes[1].1);
        assert_eq!(hook.passes[0].2, hook.passes[1].2);
        assert_eq!(hook.passes[0].1, m.encoder_params().as_ptr() as usize);

        // A mutation of the encoder shows up in both branches: with pre == post
        // the two bottlenecks stay equal after the change.
        m.encoder_params_mut()[0] += 0.5;
        let mut hook = RecordingHook::default();
        m.forward_with_hook(&a, &a, &mut hook).unwrap();
        assert!(hook.differences.iter().all(|d| d.max_abs() == 0.0));
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let mut m: DualUNetModel<f32> = build_dual_unet(cfg(2, 2, SkipMode::Difference), 6).unwrap();
        m.zero_head();
        let pre = raster(16, 1);
        let post = raster(16, 2);
        let mask = m.predict_damage(&pre, &post).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0));
        assert_eq!((mask.width(), mask.height()), (16, 16));
        let georef = mask.georef.as_ref().unwrap();
        assert_eq!(georef.transform, pre.geotransform);
    }

    #[test]
    fn misaligned_pair_is_an_alignment_error() {
        let m: DualUNetModel<f32> = build_dual_unet(cfg(2, 2, SkipMode::Difference), 6).unwrap();
        let pre = raster(16, 1);
        let mut post = raster(16, 2);
        post.geotransform.origin_x += 1.0;
        assert!(matches!(m.predict_damage(&pre, &post), Err(Error::Alignment(_))));
    }

    /// `L = sum(c * logits) + 0.5 * sum(logits^2)`: smooth, with a cheap exact
    /// logit gradient, so any mismatch is the network's backward pass.
    fn probe_loss(coef: &[f64]) -> impl FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> + '_ {
        move |z: &Tensor<f64>| {
            let mut g = z.clone();
            let mut v = 0.0;
            for ((gi, &zi), &ci) in g.data.iter_mut().zip(&z.data).zip(coef) {
                v += ci * zi + 0.5 * zi * zi;
                *gi = ci + zi;
            }
            Ok((v, g))
        }
    }

    fn gradient_check(mode: SkipMode) {
        let mut m: DualUNetModel<f64> = build_dual_unet(cfg(2, 2, mode), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // non-zero biases keep ReLUs away from exact zero crossings
        for v in m.params_mut().iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let a: Tensor<f64> = random_tensor(&mut rng, 3, 8, 8);
        let b: Tensor<f64> = random_tensor(&mut rng, 3, 8, 8);
        let coef: Vec<f64> = (0..5 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = vec![0.0; m.param_count()];
        m.backprop(&[&a, &b], &mut probe_loss(&coef), &mut grads).unwrap();

        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..m.param_count() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + eps;
            let (lp, _) = probe_loss(&coef)(&m.forward(&a, &b).unwrap()).unwrap();
            m.params_mut()[i] = orig - eps;
            let (lm, _) = probe_loss(&coef)(&m.forward(&a, &b).unwrap()).unwrap();
            m.params_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let denom = grads[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max((grads[i] - num).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst:e}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(SkipMode::Difference);
    }

    #[test]
    fn gradients_match_finite_differences_pre_plus_difference() {
        gradient_check(SkipMode::PrePlusDifference);
    }
}
