//! Dense rank-4 `f64` tensors in (batch, channels, height, width) order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};

/// A rank-4 real array laid out as contiguous NCHW.
///
/// Every feature map flowing through the network, every convolution kernel
/// (`[out, in/groups, k, k]`) and every image batch is a `Tensor`. Scalars
/// are `[1, 1, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

/// Alias used where a tensor carries activations rather than weights.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            data.len() == numel,
            Dimension,
            "shape {shape:?} needs {numel} elements, got {}",
            data.len()
        );
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of elements in one (height, width) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.offset(n, c, h, w);
        &mut self.data[i]
    }

    /// The contiguous (height, width) plane of sample `n`, channel `c`.
    #[inline]
    pub fn channel_plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn channel_plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n` as one contiguous slice.
    #[inline]
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape[1] * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Dimension,
            "{what}: shape {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(())
    }

    /// Channels `[start, start + len)` of every sample.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        ensure!(
            start + len <= c && len > 0,
            Dimension,
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        );
        let plane = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for b in 0..n {
            let src = &self.sample(b)[start * plane..(start + len) * plane];
            out.sample_mut(b).copy_from_slice(src);
        }
        Ok(out)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        ensure!(!parts.is_empty(), Dimension, "concat of zero tensors");
        let [n, _, h, w] = parts[0].shape;
        for p in parts {
            ensure!(
                p.batch() == n && p.height() == h && p.width() == w,
                Dimension,
                "concat: shape {:?} incompatible with {:?}",
                p.shape,
                parts[0].shape
            );
        }
        let c: usize = parts.iter().map(|p| p.channels()).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            let dst = out.sample_mut(b);
            let mut at = 0;
            for p in parts {
                let src = p.sample(b);
                dst[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(out)
    }

    /// 2×2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        ensure!(
            h % 2 == 0 && w % 2 == 0,
            Input,
            "2x average pooling needs even spatial dims, got {h}x{w}"
        );
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.channel_plane(b, ch);
                let dst = out.channel_plane_mut(b, ch);
                for y in 0..ho {
                    for x in 0..wo {
                        let i = 2 * y * w + 2 * x;
                        dst[y * wo + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mirror along the width axis.
    pub fn hflip(&self) -> Tensor {
        let [_, _, _, w] = self.shape;
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        ensure!(!samples.is_empty(), Dimension, "stack of zero tensors");
        let [_, c, h, w] = samples[0].shape;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        let mut n = 0;
        for s in samples {
            ensure!(
                s.shape[1..] == samples[0].shape[1..],
                Dimension,
                "stack: shape {:?} vs {:?}",
                s.shape,
                samples[0].shape
            );
            data.extend_from_slice(&s.data);
            n += s.batch();
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    /// Sample `n` as its own batch of one.
    pub fn select(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.sample(n).to_vec(),
        }
    }
}
