//! PSNR and SSIM on RGB images in `[0, 1]`.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Side of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

/// `10·log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    ensure!(a.numel() > 0, Input, "psnr of empty images");
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let product = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&product(|x, _| x * x), h, w, taps);
    let bb = filter_valid(&product(|_, y| y * y), h, w, taps);
    let ab = filter_valid(&product(|x, y| x * y), h, w, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = aa[i] - ma * ma;
        let var_b = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / n as f64
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), computed per
/// channel and averaged over every (sample, channel) plane.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let [n, c, h, w] = a.shape();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        Input,
        "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
    );
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for s in 0..n {
        for ch in 0..c {
            total += ssim_plane(a.channel_plane(s, ch), b.channel_plane(s, ch), h, w, &taps);
        }
    }
    Ok(total / (n * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = Tensor::full([1, 3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_of_uniform_tenth_error_is_twenty_db() {
        let a = Tensor::full([1, 3, 5, 5], 0.5);
        let b = Tensor::full([1, 3, 5, 5], 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn smaller_errors_raise_psnr() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut r);
        let err = Tensor::randn([1, 3, 8, 8], 0.1, &mut r);
        let far = a.zip_map(&err, |x, e| x + e).unwrap();
        let near = a.zip_map(&err, |x, e| x + 0.5 * e).unwrap();
        assert!(psnr(&a, &near, 1.0).unwrap() > psnr(&a, &far, 1.0).unwrap());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform([2, 3, 16, 16], 0.0, 1.0, &mut r);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_complementary_binary_images_is_symmetric_and_below_one() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::rand_uniform([1, 1, 16, 16], 0.0, 1.0, &mut r).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let b = a.map(|v| 1.0 - v);
        let ab = ssim(&a, &b).unwrap();
        assert!(ab < 1.0);
        assert_eq!(ab, ssim(&b, &a).unwrap());
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn small_images_are_rejected() {
        let a = Tensor::zeros([1, 3, 8, 8]);
        assert!(ssim(&a, &a).is_err());
    }
}
