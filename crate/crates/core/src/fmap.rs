//! Channel-major 2D value maps.
//!
//! One type serves both rendered/encoded feature maps (C×h×w) and RGB
//! images (C = 3). Data layout is `[channel][row][col]`, contiguous per
//! channel.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    /// Downsample factor relative to the full-resolution image this map was
    /// derived from (1 for images, 4 for encoder features).
    downsample: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            downsample: 1,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {}x{}x{}, got {}",
                channels * height * width,
                channels,
                height,
                width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            downsample: 1,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut m = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    m.set(c, y, x, v);
                }
            }
        }
        m
    }

    pub fn with_downsample(mut self, k: usize) -> Self {
        self.downsample = k;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn downsample(&self) -> usize {
        self.downsample
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] += v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Pixel vector across channels at (y, x).
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = f(*v);
        }
        out
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Average-pool each channel by a factor `k` (dimensions must divide).
    pub fn avg_pool(&self, k: usize) -> Result<Self> {
        if k == 0 || self.height % k != 0 || self.width % k != 0 {
            return Err(Error::Usage(format!(
                "avg_pool factor {} does not divide {}x{}",
                k, self.height, self.width
            )));
        }
        let (h, w) = (self.height / k, self.width / k);
        let mut out = Self::zeros(self.channels, h, w);
        let inv = 1.0 / (k * k) as f64;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += self.get(c, y * k + dy, x * k + dx);
                        }
                    }
                    out.set(c, y, x, acc * inv);
                }
            }
        }
        out.downsample = self.downsample * k;
        Ok(out)
    }

    /// Adjoint of `avg_pool`: spread each pooled value back over its k×k
    /// cell, divided by k².
    pub fn avg_pool_backward(&self, k: usize, full_h: usize, full_w: usize) -> Result<Self> {
        if self.height * k != full_h || self.width * k != full_w {
            return Err(Error::ShapeMismatch(format!(
                "pooled {}x{} with k={} does not expand to {}x{}",
                self.height, self.width, k, full_h, full_w
            )));
        }
        let mut out = Self::zeros(self.channels, full_h, full_w);
        let inv = 1.0 / (k * k) as f64;
        for c in 0..self.channels {
            for y in 0..full_h {
                for x in 0..full_w {
                    out.set(c, y, x, self.get(c, y / k, x / k) * inv);
                }
            }
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("mean_abs_diff shapes differ".into()));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("max_abs_diff shapes differ".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// PSNR in dB between two maps with values nominally in [0, 1].
pub fn psnr(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("psnr shapes differ".into()));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < 1e-12 {
        return Ok(120.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_of_constant_is_constant() {
        let m = FeatureMap::from_fn(2, 8, 8, |_, _, _| 3.5);
        let p = m.avg_pool(4).unwrap();
        assert_eq!(p.height(), 2);
        assert_eq!(p.downsample(), 4);
        assert!(p.data().iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn pool_backward_is_adjoint() {
        // <pool(x), y> == <x, pool_backward(y)> for the linear pooling map.
        let x = FeatureMap::from_fn(1, 4, 4, |_, y, xx| (y * 4 + xx) as f64);
        let y = FeatureMap::from_fn(1, 2, 2, |_, r, c| 1.0 + (r * 2 + c) as f64);
        let px = x.avg_pool(2).unwrap();
        let by = y.avg_pool_backward(2, 4, 4).unwrap();
        let lhs: f64 = px.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(by.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_identical_maps_saturates() {
        let m = FeatureMap::from_fn(3, 4, 4, |c, y, x| (c + y + x) as f64 * 0.01);
        assert!(psnr(&m, &m).unwrap() > 100.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = FeatureMap::zeros(1, 2, 2);
        let b = FeatureMap::zeros(1, 2, 3);
        assert!(psnr(&a, &b).is_err());
        assert!(a.mean_abs_diff(&b).is_err());
    }
}
