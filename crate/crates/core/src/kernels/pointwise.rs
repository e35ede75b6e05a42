//! Channel-axis normalizations and element-wise activations.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Intermediate values of a channel layer norm needed for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` per (n, h, w), stored as `[N, 1, H, W]`.
    pub inv_std: Tensor,
}

/// Normalizes the channel vector at every spatial location, then applies a
/// per-channel affine map.
pub fn layer_norm_channels(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let [n, c, h, w] = x.shape();
    ensure!(c >= 1, Dimension, "layer norm needs at least one channel");
    ensure!(
        gain.numel() == c && bias.numel() == c,
        Dimension,
        "layer norm affine has {}/{} entries for {c} channels",
        gain.numel(),
        bias.numel()
    );
    let plane = h * w;
    let mut normalized = Tensor::zeros(x.shape());
    let mut inv_std = Tensor::zeros([n, 1, h, w]);
    let mut out = Tensor::zeros(x.shape());
    let inv_c = 1.0 / c as f64;
    for b in 0..n {
        let xs = x.sample(b);
        let mut mean = vec![0.0; plane];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&xs[ch * plane..(ch + 1) * plane]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![0.0; plane];
        for ch in 0..c {
            for ((s, v), m) in var.iter_mut().zip(&xs[ch * plane..(ch + 1) * plane]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let istd = inv_std.sample_mut(b);
        for (i, s) in istd.iter_mut().zip(&var) {
            *i = 1.0 / (s * inv_c + eps).sqrt();
        }
        let istd = inv_std.sample(b).to_vec();
        let ns = normalized.sample_mut(b);
        for ch in 0..c {
            let range = ch * plane..(ch + 1) * plane;
            for (((o, v), m), i) in ns[range.clone()].iter_mut().zip(&xs[range]).zip(&mean).zip(&istd) {
                *o = (v - m) * i;
            }
        }
        let os = out.sample_mut(b);
        for ch in 0..c {
            let (g, bb) = (gain.data()[ch], bias.data()[ch]);
            let range = ch * plane..(ch + 1) * plane;
            for (o, v) in os[range.clone()].iter_mut().zip(&normalized.sample(b)[range]) {
                *o = g * v + bb;
            }
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_channels_backward(
    dout: &Tensor,
    gain: &Tensor,
    cache: &LayerNormCache,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = dout.shape();
    let plane = h * w;
    let mut dx = Tensor::zeros(dout.shape());
    let mut dgain = Tensor::zeros([1, c, 1, 1]);
    let mut dbias = Tensor::zeros([1, c, 1, 1]);
    let inv_c = 1.0 / c as f64;
    for b in 0..n {
        let dy = dout.sample(b);
        let xh = cache.normalized.sample(b);
        let istd = cache.inv_std.sample(b);
        let mut sum_dxh = vec![0.0; plane];
        let mut sum_dxh_xh = vec![0.0; plane];
        for ch in 0..c {
            let g = gain.data()[ch];
            let range = ch * plane..(ch + 1) * plane;
            let (mut dg, mut db) = (0.0, 0.0);
            for (p, (d, x)) in dy[range.clone()].iter().zip(&xh[range]).enumerate() {
                dg += d * x;
                db += d;
                let dxh = d * g;
                sum_dxh[p] += dxh;
                sum_dxh_xh[p] += dxh * x;
            }
            dgain.data_mut()[ch] += dg;
            dbias.data_mut()[ch] += db;
        }
        let dxs = dx.sample_mut(b);
        for ch in 0..c {
            let g = gain.data()[ch];
            for p in 0..plane {
                let i = ch * plane + p;
                let dxh = dy[i] * g;
                dxs[i] = istd[p] * (dxh - inv_c * sum_dxh[p] - xh[i] * inv_c * sum_dxh_xh[p]);
            }
        }
    }
    (dx, dgain, dbias)
}

/// Softmax across the channel axis at every (n, h, w).
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        let xs = x.sample(b);
        let os = out.sample_mut(b);
        for p in 0..plane {
            let max = (0..c).map(|ch| xs[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (xs[ch * plane + p] - max).exp();
                os[ch * plane + p] = e;
                total += e;
            }
            for ch in 0..c {
                os[ch * plane + p] /= total;
            }
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output `y`.
pub fn softmax_channels_backward(y: &Tensor, dout: &Tensor) -> Tensor {
    let [n, c, h, w] = y.shape();
    let plane = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for b in 0..n {
        let ys = y.sample(b);
        let ds = dout.sample(b);
        let dxs = dx.sample_mut(b);
        for p in 0..plane {
            let dot: f64 = (0..c).map(|ch| ys[ch * plane + p] * ds[ch * plane + p]).sum();
            for ch in 0..c {
                let i = ch * plane + p;
                dxs[i] = ys[i] * (ds[i] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-13);
        assert!((gelu(-1.0) + 0.158_655_253_931_457).abs() < 1e-13);
        let h = 1e-6;
        for x in [-2.5, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax_channels(&Tensor::zeros([1, 4, 2, 3]));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
