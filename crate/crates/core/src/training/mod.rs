//! Losses, class weighting, oversampling and the training loop shared by
//! both network families.

mod loss;
mod sampling;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    combined_loss, combined_loss_grad, generalized_dice_loss, generalized_dice_loss_grad, one_hot, weighted_cross_entropy,
    weighted_cross_entropy_grad, LossConfig,
};
pub use sampling::{build_sampling_plan, class_weights_from_counts, compute_class_weights, ClassSet, SamplingPlan, CLASS_WEIGHT_CAP};

use crate::error::{invalid, Error, Result};
use crate::metrics::{f1_per_class, ConfusionMatrix};
use crate::mask::ClassMask;
use crate::nn::{argmax, Network, Scalar, Tensor};
use crate::raster::{normalize, ChannelStats, GeoRaster};

/// Adaptive-moment optimizer settings plus batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
    /// Random quarter turns applied identically to inputs and target.
    pub rotate90: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, batch_size: 4, rotate90: false }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("optimizer needs lr > 0 and betas in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        Ok(())
    }
}

pub struct Adam<T> {
    config: OptimizerConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: OptimizerConfig, n: usize) -> Self {
        Self { config, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = one - T::lit(libm::pow(c.beta1, self.t as f64));
        let bc2 = one - T::lit(libm::pow(c.beta2, self.t as f64));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// One training example: network inputs (one or two images) and the
/// per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub inputs: Vec<Tensor<T>>,
    pub target: Vec<u8>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(inputs: Vec<Tensor<T>>, target: Vec<u8>) -> Result<Self> {
        let first = inputs.first().ok_or_else(|| invalid!("sample without inputs"))?;
        if inputs.iter().any(|t| t.h != first.h || t.w != first.w) {
            return Err(invalid!("sample inputs differ in size"));
        }
        if target.len() != first.plane() {
            return Err(invalid!("target has {} pixels, inputs {}", target.len(), first.plane()));
        }
        Ok(Self { inputs, target })
    }

    pub fn classes(&self) -> ClassSet {
        ClassSet::of_labels(&self.target)
    }

    fn rotated(&self, quarter_turns: usize) -> Self {
        let (h, w) = (self.inputs[0].h, self.inputs[0].w);
        Self {
            inputs: self.inputs.iter().map(|t| rot90_tensor(t, quarter_turns)).collect(),
            target: rot90_plane(&self.target, h, w, quarter_turns),
        }
    }
}

fn input_tensor<T: Scalar>(r: &GeoRaster, stats: Option<&ChannelStats>) -> Result<Tensor<T>> {
    Ok(match stats {
        Some(s) => Tensor::from_raster(&normalize(r, s)?),
        None => Tensor::from_raster(r),
    })
}

/// Sample for a single-input segmentation network.
pub fn segmentation_sample<T: Scalar>(tile: &GeoRaster, truth: &ClassMask, stats: Option<&ChannelStats>) -> Result<Sample<T>> {
    if (tile.width(), tile.height()) != (truth.width(), truth.height()) {
        return Err(invalid!("tile and mask differ in size"));
    }
    Sample::new(vec![input_tensor(tile, stats)?], truth.data().to_vec())
}

/// Sample for the dual network; both images share one set of statistics.
pub fn damage_sample<T: Scalar>(pre: &GeoRaster, post: &GeoRaster, truth: &ClassMask, stats: Option<&ChannelStats>) -> Result<Sample<T>> {
    if !pre.same_grid(post) {
        return Err(Error::Alignment("pre and post images are not on the same grid".into()));
    }
    if (pre.width(), pre.height()) != (truth.width(), truth.height()) {
        return Err(invalid!("images and mask differ in size"));
    }
    Sample::new(vec![input_tensor(pre, stats)?, input_tensor(post, stats)?], truth.data().to_vec())
}

/// Counter-clockwise quarter turns of one row-major plane.
fn rot90_plane<V: Copy>(src: &[V], h: usize, w: usize, k: usize) -> Vec<V> {
    let mut cur = src.to_vec();
    let (mut ch, mut cw) = (h, w);
    for _ in 0..k % 4 {
        let mut next = Vec::with_capacity(cur.len());
        // new[y][x] = old[x][cw - 1 - y]; new is cw rows by ch columns
        for y in 0..cw {
            for x in 0..ch {
                next.push(cur[x * cw + (cw - 1 - y)]);
            }
        }
        cur = next;
        core::mem::swap(&mut ch, &mut cw);
    }
    cur
}

fn rot90_tensor<T: Scalar>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(t.data.len());
    for c in 0..t.c {
        data.extend(rot90_plane(t.channel(c), t.h, t.w, k));
    }
    let (h, w) = if k % 2 == 1 { (t.w, t.h) } else { (t.h, t.w) };
    Tensor { c: t.c, h, w, data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean combined loss over the epoch's plan.
    pub loss: f64,
    pub val_accuracy: Option<f64>,
    /// Per-class validation F1 (empty without a validation split).
    pub val_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

/// Pixel confusion matrix of `model` over `samples`.
pub fn evaluate<T: Scalar, M: Network<T>>(model: &M, samples: &[Sample<T>]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        let inputs: Vec<&Tensor<T>> = s.inputs.iter().collect();
        let pred = argmax(&model.logits(&inputs)?);
        cm.accumulate(&pred, &s.target)?;
    }
    Ok(cm)
}

pub fn train<T: Scalar, M: Network<T>>(
    model: &mut M,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    plan: &SamplingPlan,
    loss_config: &LossConfig,
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<History> {
    train_with_observer(model, train_set, val_set, plan, loss_config, optimizer, epochs, seed, &mut |_| {})
}

/// [`train`], calling `observer` after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_with_observer<T: Scalar, M: Network<T>>(
    model: &mut M,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    plan: &SamplingPlan,
    loss_config: &LossConfig,
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<History> {
    optimizer.validate()?;
    loss_config.validate(model.num_classes())?;
    if let Some(&bad) = plan.indices.iter().find(|&&i| i >= train_set.len()) {
        return Err(invalid!("sampling plan refers to sample {bad} of {}", train_set.len()));
    }
    for s in train_set.iter().chain(val_set) {
        if s.inputs.len() != model.input_count() {
            return Err(invalid!("model takes {} inputs, sample has {}", model.input_count(), s.inputs.len()));
        }
    }
    let mut history = History {
        optimizer: "adam".into(),
        learning_rate: optimizer.learning_rate,
        batch_size: optimizer.batch_size,
        seed,
        epochs: Vec::with_capacity(epochs),
    };
    if epochs == 0 || plan.is_empty() {
        return Ok(history);
    }
    let n = model.params().len();
    let mut adam = Adam::new(optimizer.clone(), n);
    let mut grads = vec![T::zero(); n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for epoch in 1..=epochs {
        let order = plan.reshuffled(rng.random());
        let mut total = 0.0;
        let mut step = 0;
        for batch in order.indices.chunks(optimizer.batch_size) {
            grads.fill(T::zero());
            let scale = T::one() / T::lit(batch.len() as f64);
            for &i in batch {
                let rotated;
                let sample = if optimizer.rotate90 {
                    rotated = train_set[i].rotated(rng.random_range(0..4));
                    &rotated
                } else {
                    &train_set[i]
                };
                let inputs: Vec<&Tensor<T>> = sample.inputs.iter().collect();
                let target = &sample.target;
                let mut loss_fn = |z: &Tensor<T>| {
                    let (l, mut g) = combined_loss_grad(z, target, loss_config)?;
                    for v in &mut g.data {
                        *v *= scale;
                    }
                    Ok((l, g))
                };
                let l = model.backprop(&inputs, &mut loss_fn, &mut grads)?.as_f64();
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, step, loss: l });
                }
                total += l;
                step += 1;
            }
            adam.step(model.params_mut(), &grads);
        }
        let (val_accuracy, val_f1) = if val_set.is_empty() {
            (None, Vec::new())
        } else {
            let cm = evaluate(model, val_set)?;
            (Some(cm.accuracy()), f1_per_class(&cm))
        };
        let record = EpochRecord { epoch, loss: total / step as f64, val_accuracy, val_f1 };
        observer(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between backpropagated and central-difference
/// gradients of the combined loss, over every parameter. The relative error
/// is `|a - n| / max(|a|, |n|, 1e-6)`: below 1e-6 the difference quotient is
/// dominated by f64 round-off in the loss.
pub fn gradient_check<M: Network<f64>>(
    model: &mut M,
    inputs: &[&Tensor<f64>],
    target: &[u8],
    loss: &LossConfig,
    step: f64,
) -> Result<f64> {
    let mut grads = vec![0.0; model.params().len()];
    let mut f = |z: &Tensor<f64>| combined_loss_grad(z, target, loss);
    model.backprop(inputs, &mut f, &mut grads)?;
    let mut worst: f64 = 0.0;
    for (i, &analytic) in grads.iter().enumerate() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + step;
        let lp = combined_loss(&model.logits(inputs)?, target, loss)?;
        model.params_mut()[i] = orig - step;
        let lm = combined_loss(&model.logits(inputs)?, target, loss)?;
        model.params_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let denom = analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_dual_unet, build_segmentation_unet, DualUNetConfig, SegUNetConfig};

    fn toy_samples(n: usize, size: usize) -> Vec<Sample<f32>> {
        (0..n)
            .map(|s| {
                let target: Vec<u8> = (0..size * size).map(|i| ((i % size) >= size / 2) as u8).collect();
                let data = target.iter().map(|&t| t as f32 + 0.05 * ((s + 1) as f32)).collect();
                Sample::new(vec![Tensor::from_vec(1, size, size, data).unwrap()], target).unwrap()
            })
            .collect()
    }

    fn three_channel(samples: Vec<Sample<f32>>) -> Vec<Sample<f32>> {
        samples
            .into_iter()
            .map(|s| {
                let t = &s.inputs[0];
                let data = [t.data.clone(), t.data.clone(), t.data.clone()].concat();
                Sample { inputs: vec![Tensor::from_vec(3, t.h, t.w, data).unwrap()], target: s.target }
            })
            .collect()
    }

    fn seg_config() -> SegUNetConfig {
        SegUNetConfig { in_channels: 3, num_classes: 2, depth: 2, base_width: 4, ..SegUNetConfig::default() }
    }

    fn loss2() -> LossConfig {
        LossConfig { class_weights: vec![1.0, 1.0], ..LossConfig::default() }
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let mut m = build_segmentation_unet::<f32>(SegUNetConfig { class_names: Vec::new(), ..seg_config() }, 1).unwrap();
        let before = m.params().to_vec();
        let data = three_channel(toy_samples(3, 8));
        let plan = build_sampling_plan(&[ClassSet(1); 3], 1, 0);
        let h = train(&mut m, &data, &[], &plan, &loss2(), &OptimizerConfig::default(), 0, 0).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn learns_a_trivial_split_and_is_deterministic() {
        let data = three_channel(toy_samples(4, 8));
        let plan = build_sampling_plan(&data.iter().map(Sample::classes).collect::<Vec<_>>(), 4, 2);
        let opt = OptimizerConfig { learning_rate: 1e-2, batch_size: 2, ..OptimizerConfig::default() };
        let cfg = SegUNetConfig { class_names: Vec::new(), ..seg_config() };
        let run = || {
            let mut m = build_segmentation_unet::<f32>(cfg.clone(), 3).unwrap();
            let h = train(&mut m, &data, &data, &plan, &loss2(), &opt, 15, 9).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1.params(), m2.params());
        assert_eq!(h1, h2);
        assert!(h1.epochs.iter().all(|e| e.loss.is_finite()));
        assert!(h1.epochs.last().unwrap().val_accuracy.unwrap() > 0.95);
    }

    #[test]
    fn divergence_is_reported() {
        let data = three_channel(toy_samples(2, 8));
        let mut m = build_segmentation_unet::<f32>(SegUNetConfig { class_names: Vec::new(), ..seg_config() }, 1).unwrap();
        m.params_mut()[0] = f32::NAN;
        let plan = build_sampling_plan(&[ClassSet(1); 2], 1, 0);
        let err = train(&mut m, &data, &[], &plan, &loss2(), &OptimizerConfig::default(), 1, 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, step: 0, .. }));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let data = three_channel(toy_samples(2, 8));
        let mut dual = build_dual_unet::<f32>(DualUNetConfig { depth: 2, base_width: 2, ..DualUNetConfig::default() }, 0).unwrap();
        let plan = build_sampling_plan(&[ClassSet(1); 2], 1, 0);
        let loss = LossConfig::default();
        assert!(train(&mut dual, &data, &[], &plan, &loss, &OptimizerConfig::default(), 1, 0).is_err());
    }

    #[test]
    fn quarter_turns_compose() {
        let src: Vec<u8> = (0..6).collect();
        // 2 rows x 3 columns
        let once = rot90_plane(&src, 2, 3, 1);
        assert_eq!(once, vec![2, 5, 1, 4, 0, 3]);
        assert_eq!(rot90_plane(&src, 2, 3, 4), src);
        assert_eq!(rot90_plane(&rot90_plane(&src, 2, 3, 2), 2, 3, 2), src);
    }

    /// Combined-loss gradients through a full dual network at f64.
    #[test]
    fn dual_network_combined_loss_gradient() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = build_dual_unet::<f64>(DualUNetConfig { depth: 2, base_width: 2, ..DualUNetConfig::default() }, 3).unwrap();
        for v in m.params_mut().iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let target: Vec<u8> = (0..64).map(|_| rng.random_range(0..5)).collect();
        let cfg = LossConfig { class_weights: vec![0.5, 1.0, 2.0, 1.5, 1.0], ..LossConfig::default() };
        let worst = crate::training::gradient_check(&mut m, &[&a, &b], &target, &cfg, 1e-5).unwrap();
        assert!(worst < 1e-4, "{worst:e}");
    }
}
