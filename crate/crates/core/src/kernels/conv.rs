//! 2-D convolution and transposed convolution with zero padding.
//!
//! Dense and grouped convolutions lower to im2col + GEMM. Stride-1
//! depth-wise convolutions take a direct shift-and-accumulate path since
//! their im2col matrices would be mostly copies.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Stride, symmetric zero padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub const fn depthwise(kernel: usize, channels: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: kernel / 2,
            groups: channels,
        }
    }

    pub const fn strided(kernel: usize, stride: usize) -> Self {
        ConvSpec {
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }
}

/// Resolved sizes of one convolution, in the direction input → output.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x_shape: [usize; 4], w_shape: [usize; 4], spec: ConvSpec) -> Result<Self> {
        let [batch, cin, h, w] = x_shape;
        let [cout, cin_g, kh, kw] = w_shape;
        let g = spec.groups;
        ensure!(g >= 1 && spec.stride >= 1, Config, "conv needs groups >= 1 and stride >= 1");
        ensure!(
            cin % g == 0 && cout % g == 0 && cin_g * g == cin,
            Dimension,
            "conv weight {w_shape:?} with {g} groups does not fit {cin} input channels"
        );
        ensure!(
            h + 2 * spec.padding >= kh && w + 2 * spec.padding >= kw,
            Dimension,
            "kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        Ok(Geom {
            batch,
            cin,
            cout,
            groups: g,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            h,
            w,
            ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
            wo: (w + 2 * spec.padding - kw) / spec.stride + 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_fast_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin && self.stride == 1
    }

    /// Output columns `ox` whose input column `ox*stride - pad + kx` is in range.
    #[inline]
    fn valid_range(&self, k: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len_in - 1
        let hi_num = len_in as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).min(len_out as isize).max(0) as usize;
        if lo >= hi {
            (0, 0)
        } else {
            (lo, hi)
        }
    }
}

fn im2col(x: &[f64], g: &Geom, group: usize, col: &mut [f64]) {
    let plane = g.h * g.w;
    let op = g.out_plane();
    col.fill(0.0);
    for ci in 0..g.cin_g() {
        let src = &x[(group * g.cin_g() + ci) * plane..][..plane];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            if oy0 == oy1 {
                continue;
            }
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                if ox0 == ox1 {
                    continue;
                }
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * op..][..op];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst[ox0..ox1].copy_from_slice(&src[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[iy * g.w + ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &Geom, group: usize, dx: &mut [f64]) {
    let plane = g.h * g.w;
    let op = g.out_plane();
    for ci in 0..g.cin_g() {
        let dst = &mut dx[(group * g.cin_g() + ci) * plane..][..plane];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            if oy0 == oy1 {
                continue;
            }
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                if ox0 == ox1 {
                    continue;
                }
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * op..][..op];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        dst[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn forward_raw(x: &Tensor, w: &Tensor, g: &Geom) -> Tensor {
    let mut out = Tensor::zeros([g.batch, g.cout, g.ho, g.wo]);
    if g.is_fast_depthwise() {
        for n in 0..g.batch {
            for c in 0..g.cin {
                let src = x.channel_plane(n, c);
                let ker = w.channel_plane(c, 0);
                let dst = out.channel_plane_mut(n, c);
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                    if oy0 == oy1 {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                        if ox0 == ox1 {
                            continue;
                        }
                        let wv = ker[ky * g.kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy + ky - g.pad;
                            let s = &src[iy * g.w + ox0 + kx - g.pad..][..ox1 - ox0];
                            let d = &mut dst[oy * g.wo + ox0..oy * g.wo + ox1];
                            for (o, i) in d.iter_mut().zip(s) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
        return out;
    }
    let (k, op) = (g.col_rows(), g.out_plane());
    let mut col = vec![0.0; k * op];
    for n in 0..g.batch {
        let xs = x.sample(n);
        for grp in 0..g.groups {
            im2col(xs, g, grp, &mut col);
            let wg = &w.data()[grp * g.cout_g() * k..(grp + 1) * g.cout_g() * k];
            let dst = &mut out.sample_mut(n)[grp * g.cout_g() * op..(grp + 1) * g.cout_g() * op];
            gemm(g.cout_g(), k, op, wg, false, &col, false, 0.0, dst);
        }
    }
    out
}

fn input_grad(dout: &Tensor, w: &Tensor, g: &Geom) -> Tensor {
    let mut dx = Tensor::zeros([g.batch, g.cin, g.h, g.w]);
    if g.is_fast_depthwise() {
        for n in 0..g.batch {
            for c in 0..g.cin {
                let src = dout.channel_plane(n, c);
                let ker = w.channel_plane(c, 0);
                let dst = dx.channel_plane_mut(n, c);
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                    if oy0 == oy1 {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                        if ox0 == ox1 {
                            continue;
                        }
                        let wv = ker[ky * g.kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy + ky - g.pad;
                            let d = &mut dst[iy * g.w + ox0 + kx - g.pad..][..ox1 - ox0];
                            let s = &src[oy * g.wo + ox0..oy * g.wo + ox1];
                            for (o, i) in d.iter_mut().zip(s) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
        return dx;
    }
    let (k, op) = (g.col_rows(), g.out_plane());
    let mut col = vec![0.0; k * op];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let wg = &w.data()[grp * g.cout_g() * k..(grp + 1) * g.cout_g() * k];
            let dg = &dout.sample(n)[grp * g.cout_g() * op..(grp + 1) * g.cout_g() * op];
            gemm(k, g.cout_g(), op, wg, true, dg, false, 0.0, &mut col);
            col2im_add(&col, g, grp, dx.sample_mut(n));
        }
    }
    dx
}

fn weight_grad(x: &Tensor, dout: &Tensor, w_shape: [usize; 4], g: &Geom) -> Tensor {
    let mut dw = Tensor::zeros(w_shape);
    if g.is_fast_depthwise() {
        for n in 0..g.batch {
            for c in 0..g.cin {
                let src = x.channel_plane(n, c);
                let dy = dout.channel_plane(n, c);
                let ker = dw.channel_plane_mut(c, 0);
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                    if oy0 == oy1 {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                        if ox0 == ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy + ky - g.pad;
                            let s = &src[iy * g.w + ox0 + kx - g.pad..][..ox1 - ox0];
                            let d = &dy[oy * g.wo + ox0..oy * g.wo + ox1];
                            acc += s.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                        }
                        ker[ky * g.kw + kx] += acc;
                    }
                }
            }
        }
        return dw;
    }
    let (k, op) = (g.col_rows(), g.out_plane());
    let mut col = vec![0.0; k * op];
    for n in 0..g.batch {
        let xs = x.sample(n);
        for grp in 0..g.groups {
            im2col(xs, g, grp, &mut col);
            let dg = &dout.sample(n)[grp * g.cout_g() * op..(grp + 1) * g.cout_g() * op];
            let dwg = &mut dw.data_mut()[grp * g.cout_g() * k..(grp + 1) * g.cout_g() * k];
            gemm(g.cout_g(), op, k, dg, false, &col, true, 1.0, dwg);
        }
    }
    dw
}

fn add_bias(out: &mut Tensor, bias: &Tensor) -> Result<()> {
    ensure!(
        bias.numel() == out.channels(),
        Dimension,
        "bias has {} entries for {} channels",
        bias.numel(),
        out.channels()
    );
    for n in 0..out.batch() {
        for c in 0..out.channels() {
            let b = bias.data()[c];
            out.channel_plane_mut(n, c).iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(())
}

/// Per-channel sum of `dout`, shaped `[1, C, 1, 1]`.
pub fn bias_grad(dout: &Tensor) -> Tensor {
    let c = dout.channels();
    let mut db = Tensor::zeros([1, c, 1, 1]);
    for n in 0..dout.batch() {
        for ch in 0..c {
            db.data_mut()[ch] += dout.channel_plane(n, ch).iter().sum::<f64>();
        }
    }
    db
}

/// Output spatial size of a convolution.
pub fn conv_output_size(h: usize, w: usize, kernel: usize, spec: ConvSpec) -> (usize, usize) {
    (
        (h + 2 * spec.padding - kernel) / spec.stride + 1,
        (w + 2 * spec.padding - kernel) / spec.stride + 1,
    )
}

/// Cross-correlation of `x` (`[N, Cin, H, W]`) with `w` (`[Cout, Cin/groups, kh, kw]`).
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = Geom::new(x.shape(), w.shape(), spec)?;
    let mut out = forward_raw(x, w, &g);
    if let Some(b) = bias {
        add_bias(&mut out, b)?;
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to input and weight (bias: [`bias_grad`]).
pub fn conv2d_backward(x: &Tensor, w: &Tensor, dout: &Tensor, spec: ConvSpec) -> Result<(Tensor, Tensor)> {
    let g = Geom::new(x.shape(), w.shape(), spec)?;
    ensure!(
        dout.shape() == [g.batch, g.cout, g.ho, g.wo],
        Dimension,
        "conv gradient shape {:?} does not match output",
        dout.shape()
    );
    Ok((input_grad(dout, w, &g), weight_grad(x, dout, w.shape(), &g)))
}

/// Geometry of the forward conv whose input-gradient is this transposed conv.
fn transposed_geom(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Geom> {
    let [batch, cin, h, wd] = x.shape();
    let [wcin, cout, kh, kw] = w.shape();
    ensure!(
        wcin == cin,
        Dimension,
        "transposed conv weight {:?} expects {wcin} input channels, got {cin}",
        w.shape()
    );
    ensure!(
        h >= 1 && wd >= 1 && (h - 1) * stride + kh >= 2 * padding + 1,
        Dimension,
        "transposed conv output would be empty"
    );
    let ho = (h - 1) * stride + kh - 2 * padding;
    let wo = (wd - 1) * stride + kw - 2 * padding;
    let g = Geom::new(
        [batch, cout, ho, wo],
        [cin, cout, kh, kw],
        ConvSpec {
            stride,
            padding,
            groups: 1,
        },
    )?;
    ensure!(
        g.ho == h && g.wo == wd,
        Dimension,
        "transposed conv geometry does not invert for input {h}x{wd}"
    );
    Ok(g)
}

/// Transposed convolution; `w` is `[Cin, Cout, kh, kw]`. Output size is
/// `(H - 1)·stride + kh - 2·padding`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = transposed_geom(x, w, stride, padding)?;
    let mut out = input_grad(x, w, &g);
    if let Some(b) = bias {
        add_bias(&mut out, b)?;
    }
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = transposed_geom(x, w, stride, padding)?;
    ensure!(
        dout.shape() == [g.batch, g.cin, g.h, g.w],
        Dimension,
        "transposed conv gradient shape {:?} does not match output",
        dout.shape()
    );
    let dx = forward_raw(dout, w, &g);
    let dw = weight_grad(dout, x, w.shape(), &g);
    Ok((dx, dw))
}
