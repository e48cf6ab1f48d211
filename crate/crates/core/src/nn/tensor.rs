use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;
use crate::error::{invalid, Result};
use crate::raster::GeoRaster;

/// Channels-first feature map of a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(invalid!("tensor buffer {} does not match {c}x{h}x{w}", data.len()));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn from_raster(r: &GeoRaster) -> Self {
        let data = r.pixels().iter().map(|&v| T::lit(v as f64)).collect();
        Self { c: r.channels(), h: r.height(), w: r.width(), data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Tensor { c: self.c, h: self.h, w: self.w, data }
    }

    pub fn neg(&self) -> Tensor<T> {
        Tensor { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| -v).collect() }
    }

    /// Stack along the channel axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Tensor<T> {
        let (h, w) = (parts[0].h, parts[0].w);
        let c = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            debug_assert!(p.h == h && p.w == w);
            data.extend_from_slice(&p.data);
        }
        Tensor { c, h, w, data }
    }

    /// Split along the channel axis into pieces with the given channel counts.
    pub fn split(&self, counts: &[usize]) -> Vec<Tensor<T>> {
        let n = self.plane();
        let mut start = 0;
        counts
            .iter()
            .map(|&c| {
                let t = Tensor { c, h: self.h, w: self.w, data: self.data[start * n..(start + c) * n].to_vec() };
                start += c;
                t
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Clone> Tensor<T> {
    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}
