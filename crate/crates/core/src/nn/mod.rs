//! Convolutional networks with hand-written backward passes.
//!
//! [`SegModel`] is a single-input U-Net for scene mapping and flood extents;
//! [`DualUNetModel`] runs one shared encoder over a pre- and a post-event image
//! and feeds the decoder with the per-level feature differences.

mod dual;
mod layers;
mod scalar;
mod seg;
mod tensor;
pub mod unet;

use alloc::vec::Vec;

pub use dual::{build_dual_unet, Branch, DualUNetConfig, DualUNetModel, FeatureHook, NoHook, RecordingHook, SkipMode};
pub use scalar::{gemm, gemm_new, Mat, Scalar};
pub use seg::{build_segmentation_unet, SegModel, SegUNetConfig, Segmentation, DEFAULT_SEMANTIC_CLASSES};
pub use tensor::Tensor;
pub use unet::EncoderKind;

use crate::error::Result;

/// Loss callback used during backpropagation: maps logits to
/// `(loss, d loss / d logits)`.
pub type LossFn<'a, T> = dyn FnMut(&Tensor<T>) -> Result<(T, Tensor<T>)> + 'a;

/// Common surface of the trainable models.
pub trait Network<T: Scalar> {
    fn num_classes(&self) -> usize;
    /// Number of input images per sample (1 or 2).
    fn input_count(&self) -> usize;
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];
    fn logits(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Forward pass, loss evaluation and backward pass. Parameter gradients
    /// are added into `grads`; returns the loss.
    fn backprop(&self, inputs: &[&Tensor<T>], loss: &mut LossFn<'_, T>, grads: &mut [T]) -> Result<T>;
}

/// Numerically stable per-pixel softmax over the channel axis.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.plane();
    let c = logits.c;
    let mut out = Tensor::zeros(c, logits.h, logits.w);
    for i in 0..n {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(logits.data[k * n + i]);
        }
        let mut z = T::zero();
        for k in 0..c {
            let e = (logits.data[k * n + i] - m).exp();
            out.data[k * n + i] = e;
            z += e;
        }
        for k in 0..c {
            out.data[k * n + i] = out.data[k * n + i] / z;
        }
    }
    out
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax<T: Scalar>(scores: &Tensor<T>) -> Vec<u8> {
    let n = scores.plane();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..scores.c {
                if scores.data[k * n + i] > scores.data[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
