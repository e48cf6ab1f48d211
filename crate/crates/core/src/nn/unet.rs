//! Encoder and decoder halves shared by the single- and dual-input U-Nets.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::layers::{max_pool2, max_pool2_backward, Conv, ConvCache, ParamBuilder, UpConv};
use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Two 3x3 convolutions per level, widths doubling per level.
    #[default]
    Generic,
    /// Widths scaled by 1.1 and three convolutions per level (the B2 width
    /// and depth coefficients of compound scaling). Same per-level spatial
    /// shapes as `Generic`.
    CompoundScaled,
}

impl EncoderKind {
    pub fn convs_per_level(self) -> usize {
        match self {
            EncoderKind::Generic => 2,
            // ceil(2 * 1.2)
            EncoderKind::CompoundScaled => 3,
        }
    }

    /// Channel width at `level` (0 = full resolution, `depth` = bottleneck).
    pub fn width(self, base_width: usize, level: usize) -> usize {
        let w = base_width << level;
        match self {
            EncoderKind::Generic => w,
            EncoderKind::CompoundScaled => (w * 11).div_ceil(10),
        }
    }
}

/// Stack of "same" 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub convs: Vec<Conv>,
}

pub struct BlockCache<T> {
    caches: Vec<ConvCache<T>>,
    outs: Vec<Tensor<T>>,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, n: usize) -> Self {
        let convs = (0..n).map(|i| Conv::new(pb, if i == 0 { cin } else { cout }, cout, 3, true)).collect();
        Self { convs }
    }

    pub fn param_count(cin: usize, cout: usize, n: usize) -> usize {
        Conv::param_count(cin, cout, 3) + (n - 1) * Conv::param_count(cout, cout, 3)
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let input = outs.last().unwrap_or(x);
            let (out, cache) = conv.forward(params, input);
            caches.push(cache);
            outs.push(out);
        }
        (outs.last().cloned().unwrap_or_else(|| x.clone()), BlockCache { caches, outs })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &BlockCache<T>,
        dout: Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut d = Some(dout);
        for i in (0..self.convs.len()).rev() {
            let want = need_input_grad || i > 0;
            let g = d.take()?;
            d = self.convs[i].backward(params, grads, &cache.caches[i], &cache.outs[i], g, want);
        }
        d
    }
}

/// Contracting path: `depth` levels, each a conv block followed by 2x2 max
/// pooling, then a bottleneck block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub levels: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
    pub widths: Vec<usize>,
    pub param_range: Range<usize>,
}

pub struct EncoderOutput<T> {
    /// Level outputs before pooling, shallowest first.
    pub skips: Vec<Tensor<T>>,
    pub bottom: Tensor<T>,
    cache: EncoderCache<T>,
}

struct EncoderCache<T> {
    levels: Vec<BlockCache<T>>,
    pools: Vec<(Vec<u8>, usize, usize)>,
    bottleneck: BlockCache<T>,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, in_channels: usize, depth: usize, base_width: usize, kind: EncoderKind) -> Self {
        let start = pb.len();
        let widths: Vec<usize> = (0..=depth).map(|l| kind.width(base_width, l)).collect();
        let n = kind.convs_per_level();
        let mut cin = in_channels;
        let mut levels = Vec::with_capacity(depth);
        for &w in &widths[..depth] {
            levels.push(ConvBlock::new(pb, cin, w, n));
            cin = w;
        }
        let bottleneck = ConvBlock::new(pb, cin, widths[depth], n);
        Self { levels, bottleneck, widths, param_range: start..pb.len() }
    }

    pub fn param_count(in_channels: usize, depth: usize, base_width: usize, kind: EncoderKind) -> usize {
        let n = kind.convs_per_level();
        let mut cin = in_channels;
        let mut total = 0;
        for l in 0..=depth {
            let w = kind.width(base_width, l);
            total += ConvBlock::param_count(cin, w, n);
            cin = w;
        }
        total
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn params<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.param_range.clone()]
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> EncoderOutput<T> {
        let mut skips = Vec::with_capacity(self.depth());
        let mut level_caches = Vec::with_capacity(self.depth());
        let mut pools = Vec::with_capacity(self.depth());
        let mut cur = x.clone();
        for block in &self.levels {
            let (out, cache) = block.forward(params, &cur);
            let (pooled, arg) = max_pool2(&out);
            pools.push((arg, out.h, out.w));
            level_caches.push(cache);
            skips.push(out);
            cur = pooled;
        }
        let (bottom, bcache) = self.bottleneck.forward(params, &cur);
        EncoderOutput { skips, bottom, cache: EncoderCache { levels: level_caches, pools, bottleneck: bcache } }
    }

    /// Accumulate parameter gradients given gradients w.r.t. every skip and
    /// the bottleneck output. The input gradient is not computed.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        out: &EncoderOutput<T>,
        d_skips: Vec<Tensor<T>>,
        d_bottom: Tensor<T>,
    ) {
        let cache = &out.cache;
        let mut d = self
            .bottleneck
            .backward(params, grads, &cache.bottleneck, d_bottom, true)
            .expect("input gradient requested");
        for (l, d_skip) in d_skips.into_iter().enumerate().rev() {
            let (arg, h, w) = &cache.pools[l];
            let mut dl = max_pool2_backward(&d, arg, *h, *w);
            dl.add_assign(&d_skip);
            match self.levels[l].backward(params, grads, &cache.levels[l], dl, l > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

/// Expanding path: per level an up-convolution, concatenation with the skip
/// tensor for that level, and a conv block; then a 1x1 classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    /// Deepest level first.
    pub ups: Vec<(UpConv, ConvBlock)>,
    pub head: Conv,
    /// Channels of the skip tensor expected at each level, shallowest first.
    pub skip_channels: Vec<usize>,
    pub param_range: Range<usize>,
}

pub struct DecoderCache<T> {
    up_inputs: Vec<Tensor<T>>,
    blocks: Vec<BlockCache<T>>,
    head: ConvCache<T>,
    up_channels: Vec<usize>,
}

impl Decoder {
    pub fn new(
        pb: &mut ParamBuilder,
        bottom_channels: usize,
        widths: &[usize],
        skip_channels: Vec<usize>,
        convs_per_level: usize,
        num_classes: usize,
    ) -> Self {
        let start = pb.len();
        let depth = widths.len() - 1;
        let mut cin = bottom_channels;
        let mut ups = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let up = UpConv::new(pb, cin, widths[l]);
            let block = ConvBlock::new(pb, widths[l] + skip_channels[l], widths[l], convs_per_level);
            ups.push((up, block));
            cin = widths[l];
        }
        let head = Conv::new(pb, cin, num_classes, 1, false);
        Self { ups, head, skip_channels, param_range: start..pb.len() }
    }

    pub fn param_count(
        bottom_channels: usize,
        widths: &[usize],
        skip_channels: &[usize],
        convs_per_level: usize,
        num_classes: usize,
    ) -> usize {
        let depth = widths.len() - 1;
        let mut cin = bottom_channels;
        let mut total = 0;
        for l in (0..depth).rev() {
            total += UpConv::param_count(cin, widths[l]);
            total += ConvBlock::param_count(widths[l] + skip_channels[l], widths[l], convs_per_level);
            cin = widths[l];
        }
        total + Conv::param_count(cin, num_classes, 1)
    }

    pub fn forward<T: Scalar>(&self, params: &[T], bottom: Tensor<T>, skips: &[Tensor<T>]) -> (Tensor<T>, DecoderCache<T>) {
        let depth = self.ups.len();
        let mut up_inputs = Vec::with_capacity(depth);
        let mut blocks = Vec::with_capacity(depth);
        let mut up_channels = Vec::with_capacity(depth);
        let mut x = bottom;
        for (i, (up, block)) in self.ups.iter().enumerate() {
            let l = depth - 1 - i;
            let u = up.forward(params, &x);
            up_channels.push(u.c);
            let cat = Tensor::concat(&[&u, &skips[l]]);
            up_inputs.push(x);
            let (out, cache) = block.forward(params, &cat);
            blocks.push(cache);
            x = out;
        }
        let (logits, head) = self.head.forward(params, &x);
        (logits, DecoderCache { up_inputs, blocks, head, up_channels })
    }

    /// Returns gradients w.r.t. the bottom input and every skip tensor
    /// (shallowest first).
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &DecoderCache<T>,
        logits: &Tensor<T>,
        dlogits: Tensor<T>,
    ) -> (Tensor<T>, Vec<Tensor<T>>) {
        let depth = self.ups.len();
        let mut d = self
            .head
            .backward(params, grads, &cache.head, logits, dlogits, true)
            .expect("input gradient requested");
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let l = depth - 1 - i;
            let (up, block) = &self.ups[i];
            let dcat = block.backward(params, grads, &cache.blocks[i], d, true).expect("input gradient requested");
            let mut parts = dcat.split(&[cache.up_channels[i], self.skip_channels[l]]);
            let d_skip = parts.pop().expect("two parts");
            let d_up = parts.pop().expect("two parts");
            d_skips[l] = Some(d_skip);
            d = up.backward(params, grads, &cache.up_inputs[i], &d_up);
        }
        (d, d_skips.into_iter().map(|t| t.expect("every level visited")).collect())
    }
}
