//! Convolution, transposed convolution and pooling with explicit backward
//! passes. Layers own no weights: they address slots of a flat parameter
//! vector so that optimizers, checkpoints and gradient checks all work on one
//! contiguous buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, gemm_cm, gemm_new, Mat};
use super::{Scalar, Tensor};

/// Contiguous range of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, params: &'a mut [T]) -> &'a mut [T] {
        &mut params[self.offset..self.offset + self.len]
    }

    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zero,
}

/// Hands out parameter slots in order and records how to initialize them.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    len: usize,
    slots: Vec<(Slot, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&mut self, len: usize, init: Init) -> Slot {
        let slot = Slot { offset: self.len, len };
        self.len += len;
        self.slots.push((slot, init));
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Deterministic initial values: one ChaCha stream consumed slot by slot.
    pub fn initialize<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.len);
        for (slot, init) in &self.slots {
            match *init {
                Init::He { fan_in } => {
                    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
                    for _ in 0..slot.len {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        out.push(T::lit(z * std));
                    }
                }
                Init::Zero => out.extend(core::iter::repeat(T::zero()).take(slot.len)),
            }
        }
        out
    }
}

/// Square "same" convolution with kernel 3 (padding 1) or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub relu: bool,
    pub weight: Slot,
    pub bias: Slot,
}

pub struct ConvCache<T> {
    input: Tensor<T>,
}

/// Pixels per im2col block. Small enough for a block to stay in cache
/// between being built and being multiplied.
const BLOCK_PIXELS: usize = 512;

fn row_blocks(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let step = (BLOCK_PIXELS / w.max(1)).max(1);
    (0..h).step_by(step).map(move |y0| (y0, (y0 + step).min(h)))
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, relu: bool) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = cin * k * k;
        let weight = pb.alloc(cout * fan_in, Init::He { fan_in });
        let bias = pb.alloc(cout, Init::Zero);
        Self { cin, cout, k, relu, weight, bias }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Unfolded input for output rows `y0..y1` (`fan_in x (y1 - y0) * w`).
    fn input_block<'a, T: Scalar>(&self, x: &'a Tensor<T>, y0: usize, y1: usize, col: &'a mut Vec<T>) -> Mat<'a, T> {
        let len = (y1 - y0) * x.w;
        if self.k == 1 {
            return Mat::rm_cols(&x.data, x.c, x.plane(), y0 * x.w, len);
        }
        col.clear();
        im2col3(x, y0, y1, col);
        Mat::rm(col, self.fan_in(), len)
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        debug_assert_eq!(x.c, self.cin);
        let n = x.plane();
        let weight = Mat::rm(self.weight.of(params), self.cout, self.fan_in());
        let bias = self.bias.of(params);
        let mut data = vec![T::zero(); self.cout * n];
        let mut col = Vec::new();
        for (y0, y1) in row_blocks(x.h, x.w) {
            let (p0, len) = (y0 * x.w, (y1 - y0) * x.w);
            let block = gemm_new(T::one(), weight, self.input_block(x, y0, y1, &mut col));
            for ((src, &b), dst) in block.chunks_exact(len).zip(bias).zip(data.chunks_exact_mut(n)) {
                for (d, &v) in dst[p0..p0 + len].iter_mut().zip(src) {
                    let z = v + b;
                    *d = if self.relu && z < T::zero() { T::zero() } else { z };
                }
            }
        }
        let out = Tensor { c: self.cout, h: x.h, w: x.w, data };
        (out, ConvCache { input: x.clone() })
    }

    /// Backward pass. `out` is this layer's forward output (used for the ReLU
    /// mask) and `dout` the upstream gradient, which is consumed.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &ConvCache<T>,
        out: &Tensor<T>,
        mut dout: Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let x = &cache.input;
        let n = x.plane();
        {
            let db = self.bias.of_mut(grads);
            for (co, (row, orow)) in dout.data.chunks_exact_mut(n).zip(out.data.chunks_exact(n)).enumerate() {
                let mut acc = T::zero();
                for (g, &o) in row.iter_mut().zip(orow) {
                    if self.relu && o <= T::zero() {
                        *g = T::zero();
                    }
                    acc += *g;
                }
                db[co] += acc;
            }
        }
        let weight = Mat::rm(self.weight.of(params), self.cout, self.fan_in());
        let mut dx = need_input_grad.then(|| Tensor::zeros(self.cin, x.h, x.w));
        let mut col = Vec::new();
        for (y0, y1) in row_blocks(x.h, x.w) {
            let (p0, len) = (y0 * x.w, (y1 - y0) * x.w);
            let d = Mat::rm_cols(&dout.data, self.cout, n, p0, len);
            // dW^T += col * d^T, so the pixel axis is the reduction
            gemm_cm(T::one(), self.input_block(x, y0, y1, &mut col), d.t(), T::one(), self.weight.of_mut(grads));
            let Some(dx) = dx.as_mut() else { continue };
            let dcol = gemm_new(T::one(), weight.t(), d);
            if self.k == 1 {
                for (src, dst) in dcol.chunks_exact(len).zip(dx.data.chunks_exact_mut(n)) {
                    dst[p0..p0 + len].copy_from_slice(src);
                }
            } else {
                col2im3(&dcol, y0, y1, dx);
            }
        }
        dx
    }
}

/// Rows ordered `(ci, ky, kx)`, each covering output rows `y0..y1`; zero
/// outside the image.
fn im2col3<T: Scalar>(x: &Tensor<T>, y0: usize, y1: usize, col: &mut Vec<T>) {
    let (h, w) = (x.h, x.w);
    col.reserve(x.c * 9 * (y1 - y0) * w);
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3usize {
            for kx in 0..3usize {
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        col.resize(col.len() + w, T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            col.push(T::zero());
                            col.extend_from_slice(&s[..w - 1]);
                        }
                        1 => col.extend_from_slice(s),
                        _ => {
                            col.extend_from_slice(&s[1..]);
                            col.push(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Adds an `im2col3` block's gradient back onto `dx`.
fn col2im3<T: Scalar>(col: &[T], y0: usize, y1: usize, dx: &mut Tensor<T>) {
    let (h, w) = (dx.h, dx.w);
    let n = h * w;
    let len = (y1 - y0) * w;
    for ci in 0..dx.c {
        let dst = &mut dx.data[ci * n..(ci + 1) * n];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &col[(ci * 9 + ky * 3 + kx) * len..][..len];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let g = &row[(y - y0) * w..(y - y0 + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (dv, &gv) in d[..w - 1].iter_mut().zip(&g[1..]) {
                                *dv += gv;
                            }
                        }
                        1 => {
                            for (dv, &gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        }
                        _ => {
                            for (dv, &gv) in d[1..].iter_mut().zip(&g[..w - 1]) {
                                *dv += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 transposed convolution with stride 2 (doubles the spatial size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    /// `(cout * 4) x cin`, row index `co * 4 + dy * 2 + dx`.
    pub weight: Slot,
    pub bias: Slot,
}

impl UpConv {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize) -> Self {
        let weight = pb.alloc(cout * 4 * cin, Init::He { fan_in: cin });
        let bias = pb.alloc(cout, Init::Zero);
        Self { cin, cout, weight, bias }
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        cout * 4 * cin + cout
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let n = h * w;
        let y = gemm_new(T::one(), Mat::rm(self.weight.of(params), self.cout * 4, self.cin), Mat::rm(&x.data, self.cin, n));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(self.cout, oh, ow);
        let bias = self.bias.of(params);
        for co in 0..self.cout {
            let dst = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let src = &y[(co * 4 + q) * n..(co * 4 + q + 1) * n];
                for yy in 0..h {
                    let drow = &mut dst[(2 * yy + dy) * ow..(2 * yy + dy + 1) * ow];
                    for xx in 0..w {
                        drow[2 * xx + dx] = src[yy * w + xx] + bias[co];
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, params: &[T], grads: &mut [T], x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let n = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dy = vec![T::zero(); self.cout * 4 * n];
        {
            let db = self.bias.of_mut(grads);
            for co in 0..self.cout {
                let src = &dout.data[co * oh * ow..(co + 1) * oh * ow];
                db[co] += src.iter().copied().sum::<T>();
                for q in 0..4 {
                    let (qy, qx) = (q / 2, q % 2);
                    let dst = &mut dy[(co * 4 + q) * n..(co * 4 + q + 1) * n];
                    for yy in 0..h {
                        let srow = &src[(2 * yy + qy) * ow..(2 * yy + qy + 1) * ow];
                        for xx in 0..w {
                            dst[yy * w + xx] = srow[2 * xx + qx];
                        }
                    }
                }
            }
        }
        gemm(
            T::one(),
            Mat::rm(&dy, self.cout * 4, n),
            Mat::rm(&x.data, self.cin, n).t(),
            T::one(),
            self.weight.of_mut(grads),
        );
        let data = gemm_new(T::one(), Mat::rm(self.weight.of(params), self.cout * 4, self.cin).t(), Mat::rm(&dy, self.cout * 4, n));
        Tensor { c: self.cin, h, w, data }
    }
}

/// 2x2 max pooling; returns the pooled map and the winning offset per cell
/// (first maximum wins on ties).
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut arg = vec![0u8; x.c * oh * ow];
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for q in 1..4 {
                    if cand[q] > cand[best] {
                        best = q;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Scalar>(dout: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dout.c, h, w);
    let (oh, ow) = (dout.h, dout.w);
    for c in 0..dout.c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = (c * oh + y) * ow + xx;
                let q = arg[o] as usize;
                let idx = c * h * w + (2 * y + q / 2) * w + 2 * xx + q % 2;
                dx.data[idx] += dout.data[o];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop 3x3 convolution used as a reference.
    fn conv_ref(x: &Tensor<f64>, wts: &[f64], b: &[f64], cout: usize) -> Tensor<f64> {
        let mut out = Tensor::zeros(cout, x.h, x.w);
        for co in 0..cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = b[co];
                    for ci in 0..x.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = wts[((co * x.c + ci) * 3 + ky as usize) * 3 + kx as usize];
                                acc += wv * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(co * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn input(c: usize, h: usize, w: usize) -> Tensor<f64> {
        let data = (0..c * h * w).map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn conv3_matches_reference() {
        let mut pb = ParamBuilder::new();
        let conv = Conv::new(&mut pb, 3, 4, 3, false);
        let mut params: Vec<f64> = pb.initialize(7);
        for (i, b) in conv.bias.of_mut(&mut params).iter_mut().enumerate() {
            *b = i as f64 * 0.1;
        }
        let x = input(3, 5, 6);
        let (out, _) = conv.forward(&params, &x);
        let want = conv_ref(&x, conv.weight.of(&params), conv.bias.of(&params), 4);
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Taller than one im2col block, so rows straddle block edges.
    #[test]
    fn blocked_conv_matches_reference_and_differences() {
        let mut pb = ParamBuilder::new();
        let conv = Conv::new(&mut pb, 2, 3, 3, true);
        let params: Vec<f64> = pb.initialize(5);
        let x = input(2, 45, 24);
        let (out, cache) = conv.forward(&params, &x);
        let mut want = conv_ref(&x, conv.weight.of(&params), conv.bias.of(&params), 3);
        want.data.iter_mut().for_each(|v| *v = v.max(0.0));
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }

        // loss = sum(r * out) for fixed r
        let r: Vec<f64> = (0..out.data.len()).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let loss = |p: &[f64], x: &Tensor<f64>| -> f64 { conv.forward(p, x).0.data.iter().zip(&r).map(|(a, b)| a * b).sum() };
        let mut grads = vec![0.0; params.len()];
        let dout = Tensor::from_vec(3, 45, 24, r.clone()).unwrap();
        let dx = conv.backward(&params, &mut grads, &cache, &out, dout, true).unwrap();
        let h = 1e-6;
        for i in (0..params.len()).step_by(5) {
            let (mut p, mut m) = (params.clone(), params.clone());
            p[i] += h;
            m[i] -= h;
            let numeric = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((numeric - grads[i]).abs() < 1e-5 * numeric.abs().max(1.0), "param {i}");
        }
        for i in [0, 23, 24 * 21, 24 * 22 + 5, 1080 + 24 * 44 + 23] {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let numeric = (loss(&params, &p) - loss(&params, &m)) / (2.0 * h);
            assert!((numeric - dx.data[i]).abs() < 1e-5 * numeric.abs().max(1.0), "input {i}");
        }
    }

    #[test]
    fn upconv_places_each_tap() {
        let mut pb = ParamBuilder::new();
        let up = UpConv::new(&mut pb, 1, 1);
        let mut params = vec![0.0f64; pb.len()];
        params[up.weight.offset..up.weight.end()].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::from_vec(1, 1, 2, vec![1.0, 10.0]).unwrap();
        let out = up.forward(&params, &x);
        assert_eq!((out.h, out.w), (2, 4));
        assert_eq!(out.data, vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
    }

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (p, arg) = max_pool2(&x);
        assert_eq!(p.data, vec![0.9]);
        let dx = max_pool2_backward(&Tensor::from_vec(1, 1, 1, vec![2.0]).unwrap(), &arg, 2, 2);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let mut pb = ParamBuilder::new();
        let _ = Conv::new(&mut pb, 2, 3, 3, true);
        let a: Vec<f32> = pb.initialize(11);
        let b: Vec<f32> = pb.initialize(11);
        let c: Vec<f32> = pb.initialize(12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
