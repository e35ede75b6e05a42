//! L1 distance between 2-D discrete Fourier spectra.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::Result;
use crate::tensor::Tensor;

struct Plan2d {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    h: usize,
    w: usize,
}

impl Plan2d {
    fn new(h: usize, w: usize, direction: FftDirection) -> Self {
        let mut planner = FftPlanner::new();
        Plan2d {
            rows: planner.plan_fft(w, direction),
            cols: planner.plan_fft(h, direction),
            h,
            w,
        }
    }

    /// In-place unnormalized 2-D transform of a row-major `h × w` buffer.
    fn run(&self, buf: &mut [Complex<f64>]) {
        self.rows.process(buf);
        let mut column = vec![Complex::new(0.0, 0.0); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                column[y] = buf[y * self.w + x];
            }
            self.cols.process(&mut column);
            for y in 0..self.h {
                buf[y * self.w + x] = column[y];
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward 2-D DFT of every (n, c) plane.
pub fn dft2(x: &Tensor) -> Vec<Vec<Complex<f64>>> {
    let [n, c, h, w] = x.shape();
    let plan = Plan2d::new(h, w, FftDirection::Forward);
    let mut planes = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let mut buf: Vec<Complex<f64>> = x.channel_plane(b, ch).iter().map(|&v| Complex::new(v, 0.0)).collect();
            plan.run(&mut buf);
            planes.push(buf);
        }
    }
    planes
}

/// `(1/S) Σ |Re ΔF| + |Im ΔF|` with `ΔF = DFT(pred) - DFT(target)` per plane
/// and `S` the element count of `pred`. Also returns the gradient w.r.t.
/// `pred`.
pub fn spectral_l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.zip_map(target, |a, b| a - b)?;
    let [_, c, h, w] = diff.shape();
    let s = diff.numel() as f64;
    let spectra = dft2(&diff);
    let inverse = Plan2d::new(h, w, FftDirection::Inverse);
    let mut total = 0.0;
    let mut grad = Tensor::zeros(diff.shape());
    for (idx, spec) in spectra.into_iter().enumerate() {
        total += spec.iter().map(|z| z.re.abs() + z.im.abs()).sum::<f64>();
        let mut g: Vec<Complex<f64>> = spec.iter().map(|z| Complex::new(sign(z.re), sign(z.im))).collect();
        inverse.run(&mut g);
        let (b, ch) = (idx / c, idx % c);
        for (dst, z) in grad.channel_plane_mut(b, ch).iter_mut().zip(&g) {
            *dst = z.re / s;
        }
    }
    Ok((total / s, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dft_of_constant_concentrates_in_dc() {
        let x = Tensor::full([1, 1, 2, 2], 0.5);
        let f = dft2(&x);
        assert!((f[0][0].re - 2.0).abs() < 1e-15);
        for z in &f[0][1..] {
            assert!(z.norm() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_dft_on_a_rectangle() {
        let x = Tensor::from_fn([1, 1, 3, 4], |[_, _, h, w]| ((h * 4 + w) as f64 * 0.7).sin());
        let f = dft2(&x);
        for ky in 0..3 {
            for kx in 0..4 {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..3 {
                    for xx in 0..4 {
                        let theta = -2.0 * std::f64::consts::PI * (ky as f64 * y as f64 / 3.0 + kx as f64 * xx as f64 / 4.0);
                        acc += Complex::from_polar(x.at(0, 0, y, xx), theta);
                    }
                }
                assert!((acc - f[0][ky * 4 + kx]).norm() < 1e-12);
            }
        }
    }
}
