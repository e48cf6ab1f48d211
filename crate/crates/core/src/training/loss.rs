//! Generalized Dice, class-weighted cross entropy and their weighted sum,
//! each with an exact gradient.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{softmax, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the generalized Dice term.
    pub dice_weight: f64,
    /// Weight of the cross-entropy term.
    pub ce_weight: f64,
    pub class_weights: Vec<f64>,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { dice_weight: 1.0, ce_weight: 1.0, class_weights: vec![1.0; 5], dice_epsilon: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.dice_weight >= 0.0 && self.ce_weight >= 0.0) || self.dice_weight + self.ce_weight <= 0.0 {
            return Err(invalid!("loss weights must be >= 0 with a positive sum"));
        }
        if self.class_weights.len() != num_classes {
            return Err(invalid!("{} class weights for {num_classes} classes", self.class_weights.len()));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(invalid!("class weights must be positive and finite"));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(invalid!("dice epsilon must be positive"));
        }
        Ok(())
    }
}

/// Channels-first one-hot encoding of a label grid.
pub fn one_hot<T: Scalar>(target: &[u8], num_classes: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if target.len() != h * w {
        return Err(invalid!("target has {} pixels, expected {}", target.len(), h * w));
    }
    let mut t = Tensor::zeros(num_classes, h, w);
    let n = h * w;
    for (i, &y) in target.iter().enumerate() {
        if y as usize >= num_classes {
            return Err(invalid!("target class {y} out of range for {num_classes} classes"));
        }
        t.data[y as usize * n + i] = T::one();
    }
    Ok(t)
}

/// Per-class weights `1 / (sum_n r_ln)^2`. A class with no reference pixels
/// would get an infinite weight; it takes the largest finite weight instead,
/// so predicting it is penalized like over-predicting the smallest present
/// class.
fn dice_class_weights<T: Scalar>(target: &Tensor<T>) -> Vec<T> {
    let mut w: Vec<Option<T>> = (0..target.c)
        .map(|l| {
            let v: T = target.channel(l).iter().copied().sum();
            (v > T::zero()).then(|| T::one() / (v * v))
        })
        .collect();
    let fallback = w.iter().flatten().fold(T::zero(), |m, &v| m.max(v));
    w.iter_mut().map(|v| v.take().unwrap_or(fallback)).collect()
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid!("shape mismatch: {}x{}x{} vs {}x{}x{}", a.c, a.h, a.w, b.c, b.h, b.w));
    }
    Ok(())
}

/// `1 - (2 sum_l w_l sum_n r p + eps) / (sum_l w_l sum_n (r + p) + eps)`
/// and its gradient with respect to `probs`.
pub fn generalized_dice_loss_grad<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, epsilon: T) -> Result<(T, Tensor<T>)> {
    check_pair(probs, target)?;
    let w = dice_class_weights(target);
    let (mut num, mut den) = (T::zero(), T::zero());
    for (l, &wl) in w.iter().enumerate() {
        let (p, r) = (probs.channel(l), target.channel(l));
        let inter: T = p.iter().zip(r).map(|(&a, &b)| a * b).sum();
        let total: T = p.iter().zip(r).map(|(&a, &b)| a + b).sum();
        num += wl * inter;
        den += wl * total;
    }
    let two = T::lit(2.0);
    let top = two * num + epsilon;
    let bot = den + epsilon;
    let loss = T::one() - top / bot;
    let n = probs.plane();
    let mut grad = Tensor::zeros(probs.c, probs.h, probs.w);
    let bot2 = bot * bot;
    for (l, &wl) in w.iter().enumerate() {
        for i in 0..n {
            let r = target.data[l * n + i];
            grad.data[l * n + i] = -wl * (two * r * bot - top) / bot2;
        }
    }
    Ok((loss, grad))
}

pub fn generalized_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, epsilon: T) -> Result<T> {
    generalized_dice_loss_grad(probs, target, epsilon).map(|(l, _)| l)
}

fn check_target(c: usize, n: usize, target: &[u8], weights: &[f64]) -> Result<()> {
    if target.len() != n {
        return Err(invalid!("target has {} pixels, logits {}", target.len(), n));
    }
    if weights.len() != c {
        return Err(invalid!("{} class weights for {c} classes", weights.len()));
    }
    if let Some(&y) = target.iter().find(|&&y| y as usize >= c) {
        return Err(invalid!("target class {y} out of range for {c} classes"));
    }
    Ok(())
}

/// Mean over pixels of `w_y * -log softmax(logits)_y`, and the gradient with
/// respect to the logits.
pub fn weighted_cross_entropy_grad<T: Scalar>(logits: &Tensor<T>, target: &[u8], class_weights: &[f64]) -> Result<(T, Tensor<T>)> {
    let n = logits.plane();
    check_target(logits.c, n, target, class_weights)?;
    let probs = softmax(logits);
    let inv_n = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    let mut grad = probs.clone();
    for (i, &y) in target.iter().enumerate() {
        let y = y as usize;
        let wy = T::lit(class_weights[y]);
        // log-softmax through the max shift for a finite value on huge logits
        let mut m = T::neg_infinity();
        for k in 0..logits.c {
            m = m.max(logits.data[k * n + i]);
        }
        let lse = m + (0..logits.c).map(|k| (logits.data[k * n + i] - m).exp()).sum::<T>().ln();
        total += wy * (lse - logits.data[y * n + i]);
        for k in 0..logits.c {
            let idx = k * n + i;
            let ind = if k == y { T::one() } else { T::zero() };
            grad.data[idx] = wy * inv_n * (probs.data[idx] - ind);
        }
    }
    Ok((total * inv_n, grad))
}

pub fn weighted_cross_entropy<T: Scalar>(logits: &Tensor<T>, target: &[u8], class_weights: &[f64]) -> Result<T> {
    weighted_cross_entropy_grad(logits, target, class_weights).map(|(l, _)| l)
}

/// `alpha * GDL(softmax(logits), onehot) + beta * WCE(logits)` and the
/// gradient with respect to the logits.
pub fn combined_loss_grad<T: Scalar>(logits: &Tensor<T>, target: &[u8], config: &LossConfig) -> Result<(T, Tensor<T>)> {
    config.validate(logits.c)?;
    let n = logits.plane();
    check_target(logits.c, n, target, &config.class_weights)?;
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.c, logits.h, logits.w);
    if config.dice_weight > 0.0 {
        let alpha = T::lit(config.dice_weight);
        let probs = softmax(logits);
        let onehot = one_hot(target, logits.c, logits.h, logits.w)?;
        let (gdl, dp) = generalized_dice_loss_grad(&probs, &onehot, T::lit(config.dice_epsilon))?;
        loss += alpha * gdl;
        // softmax Jacobian: dz_k = p_k (dp_k - sum_j p_j dp_j)
        for i in 0..n {
            let dot: T = (0..logits.c).map(|k| probs.data[k * n + i] * dp.data[k * n + i]).sum();
            for k in 0..logits.c {
                let idx = k * n + i;
                grad.data[idx] += alpha * probs.data[idx] * (dp.data[idx] - dot);
            }
        }
    }
    if config.ce_weight > 0.0 {
        let beta = T::lit(config.ce_weight);
        let (ce, dz) = weighted_cross_entropy_grad(logits, target, &config.class_weights)?;
        loss += beta * ce;
        for (g, d) in grad.data.iter_mut().zip(&dz.data) {
            *g += beta * *d;
        }
    }
    Ok((loss, grad))
}

pub fn combined_loss<T: Scalar>(logits: &Tensor<T>, target: &[u8], config: &LossConfig) -> Result<T> {
    combined_loss_grad(logits, target, config).map(|(l, _)| l)
}
