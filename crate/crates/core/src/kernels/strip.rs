//! Per-pixel weighted sums along a horizontal or vertical strip.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripAxis {
    /// Taps vary along the width axis.
    Horizontal,
    /// Taps vary along the height axis.
    Vertical,
}

fn check(x: &Tensor, weights: &Tensor, dilation: usize) -> Result<usize> {
    ensure!(dilation >= 1, Config, "strip dilation must be >= 1, got {dilation}");
    let k = weights.channels();
    ensure!(k % 2 == 1, Config, "strip size must be odd, got {k}");
    ensure!(
        weights.batch() == x.batch() && weights.height() == x.height() && weights.width() == x.width(),
        Dimension,
        "strip weights {:?} do not cover features {:?}",
        weights.shape(),
        x.shape()
    );
    Ok(k)
}

/// Valid `[lo, hi)` range of positions `p` for which `p + offset` lies in `[0, len)`.
#[inline]
fn valid(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// `out[n,c,h,w] = Σ_k a[n,k,h,w] · x[n,c, pos + (k - K/2)·dilation]` along
/// `axis`, reading zeros outside the image.
pub fn strip_apply(x: &Tensor, weights: &Tensor, axis: StripAxis, dilation: usize) -> Result<Tensor> {
    let k = check(x, weights, dilation)?;
    let [n, c, h, w] = x.shape();
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for tap in 0..k {
            let offset = (tap as isize - half) * dilation as isize;
            let a = weights.channel_plane(b, tap);
            for ch in 0..c {
                let src = x.channel_plane(b, ch);
                let dst = out.channel_plane_mut(b, ch);
                match axis {
                    StripAxis::Horizontal => {
                        let (lo, hi) = valid(offset, w);
                        for y in 0..h {
                            let row = y * w;
                            for xx in lo..hi {
                                let i = row + xx;
                                dst[i] += a[i] * src[(i as isize + offset) as usize];
                            }
                        }
                    }
                    StripAxis::Vertical => {
                        let (lo, hi) = valid(offset, h);
                        let shift = offset * w as isize;
                        for y in lo..hi {
                            for i in y * w..(y + 1) * w {
                                dst[i] += a[i] * src[(i as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dweights)`.
pub fn strip_apply_backward(
    x: &Tensor,
    weights: &Tensor,
    dout: &Tensor,
    axis: StripAxis,
    dilation: usize,
) -> Result<(Tensor, Tensor)> {
    let k = check(x, weights, dilation)?;
    x.expect_same_shape(dout, "strip gradient")?;
    let [n, c, h, w] = x.shape();
    let half = (k / 2) as isize;
    let mut dx = Tensor::zeros(x.shape());
    let mut da = Tensor::zeros(weights.shape());
    for b in 0..n {
        for tap in 0..k {
            let offset = (tap as isize - half) * dilation as isize;
            let (lo, hi, shift, horizontal) = match axis {
                StripAxis::Horizontal => {
                    let (lo, hi) = valid(offset, w);
                    (lo, hi, offset, true)
                }
                StripAxis::Vertical => {
                    let (lo, hi) = valid(offset, h);
                    (lo, hi, offset * w as isize, false)
                }
            };
            let a = weights.channel_plane(b, tap).to_vec();
            let mut da_tap = vec![0.0; h * w];
            for ch in 0..c {
                let src = x.channel_plane(b, ch);
                let dy = dout.channel_plane(b, ch);
                let dxp = dx.channel_plane_mut(b, ch);
                let mut visit = |i: usize| {
                    let j = (i as isize + shift) as usize;
                    da_tap[i] += dy[i] * src[j];
                    dxp[j] += a[i] * dy[i];
                };
                if horizontal {
                    for y in 0..h {
                        for xx in lo..hi {
                            visit(y * w + xx);
                        }
                    }
                } else {
                    for y in lo..hi {
                        for i in y * w..(y + 1) * w {
                            visit(i);
                        }
                    }
                }
            }
            da.channel_plane_mut(b, tap).copy_from_slice(&da_tap);
        }
    }
    Ok((dx, da))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_three_tap_row_is_a_zero_padded_box_filter() {
        let x = Tensor::from_vec([1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let a = Tensor::full([1, 3, 1, 5], 1.0);
        let y = strip_apply(&x, &a, StripAxis::Horizontal, 1).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 12.0, 9.0]);
    }

    #[test]
    fn vertical_dilated_taps_land_on_the_right_rows() {
        let x = Tensor::from_fn([1, 1, 9, 1], |[_, _, h, _]| h as f64);
        // one-hot on the last tap: reads row h + 2·3
        let a = Tensor::from_fn([1, 5, 9, 1], |[_, k, _, _]| if k == 4 { 1.0 } else { 0.0 });
        let y = strip_apply(&x, &a, StripAxis::Vertical, 3).unwrap();
        assert_eq!(y.data(), &[6.0, 7.0, 8.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_even_strip_and_zero_dilation() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(strip_apply(&x, &Tensor::zeros([1, 2, 4, 4]), StripAxis::Horizontal, 1).is_err());
        assert!(strip_apply(&x, &Tensor::zeros([1, 3, 4, 4]), StripAxis::Horizontal, 0).is_err());
    }
}
