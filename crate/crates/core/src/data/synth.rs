//! Synthetic degradations and procedural clean images.
//!
//! Images are `[1, 3, H, W]` tensors with values in `[0, 1]`. Every function
//! is a pure function of its arguments and seed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.6, 1.8);
pub const BLUR_LENGTH_RANGE: (usize, usize) = (3, 21);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeSpec {
    pub airlight: [f64; 3],
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    /// Odd kernel length in pixels.
    pub length: usize,
    /// Direction of motion in radians, counter-clockwise from the +x axis.
    pub angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnowSpec {
    /// Expected flakes per 1000 pixels.
    pub density: f64,
    /// Semi-major axis range of a flake, in pixels.
    pub size_range: [f64; 2],
    pub opacity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Haze,
    MotionBlur,
    Snow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationSpec {
    Haze(HazeSpec),
    MotionBlur(BlurSpec),
    Snow(SnowSpec),
}

impl DegradationSpec {
    /// Draws concrete parameters for one image.
    pub fn sample<R: Rng + ?Sized>(kind: DegradationKind, rng: &mut R) -> Self {
        match kind {
            DegradationKind::Haze => DegradationSpec::Haze(HazeSpec {
                airlight: [0; 3].map(|_| rng.random_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1)),
                beta: rng.random_range(BETA_RANGE.0..=BETA_RANGE.1),
            }),
            DegradationKind::MotionBlur => {
                let half = rng.random_range(BLUR_LENGTH_RANGE.0 / 2..=BLUR_LENGTH_RANGE.1 / 2);
                DegradationSpec::MotionBlur(BlurSpec {
                    length: 2 * half + 1,
                    angle: rng.random_range(0.0..PI),
                })
            }
            DegradationKind::Snow => {
                let small = rng.random_range(0.8..1.5);
                DegradationSpec::Snow(SnowSpec {
                    density: rng.random_range(2.0..8.0),
                    size_range: [small, small + rng.random_range(0.5..2.5)],
                    opacity: rng.random_range(0.6..=1.0),
                })
            }
        }
    }

    pub fn kind(&self) -> DegradationKind {
        match self {
            DegradationSpec::Haze(_) => DegradationKind::Haze,
            DegradationSpec::MotionBlur(_) => DegradationKind::MotionBlur,
            DegradationSpec::Snow(_) => DegradationKind::Snow,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DegradationSpec::Haze(h) => {
                ensure!(
                    h.airlight.iter().all(|a| (AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1).contains(a)),
                    Config,
                    "airlight {:?} outside [0.7, 1]",
                    h.airlight
                );
                ensure!(h.beta.is_finite() && h.beta >= 0.0, Config, "scattering coefficient must be >= 0");
            }
            DegradationSpec::MotionBlur(b) => {
                ensure!(
                    b.length % 2 == 1 && b.length <= BLUR_LENGTH_RANGE.1,
                    Config,
                    "blur length must be odd and at most 21, got {}",
                    b.length
                );
                ensure!(b.angle.is_finite(), Config, "blur angle must be finite");
            }
            DegradationSpec::Snow(s) => {
                ensure!(s.density.is_finite() && s.density >= 0.0, Config, "snow density must be >= 0");
                ensure!(
                    s.size_range[0] > 0.0 && s.size_range[0] <= s.size_range[1],
                    Config,
                    "snow size range {:?} is not an increasing positive interval",
                    s.size_range
                );
                ensure!((0.0..=1.0).contains(&s.opacity), Config, "snow opacity must be in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn apply(&self, clean: &Tensor, seed: u64) -> Result<Tensor> {
        self.validate()?;
        match self {
            DegradationSpec::Haze(h) => synth_haze(clean, h, seed),
            DegradationSpec::MotionBlur(b) => synth_motion_blur(clean, b),
            DegradationSpec::Snow(s) => synth_snow(clean, s, seed),
        }
    }
}

fn check_image(img: &Tensor) -> Result<()> {
    let [n, c, h, w] = img.shape();
    ensure!(
        n == 1 && c == 3 && h > 0 && w > 0,
        Dimension,
        "expected one RGB image, got shape {:?}",
        img.shape()
    );
    Ok(())
}

/// Bilinear interpolation of a coarse `gh × gw` grid onto `h × w`.
fn upsample_grid(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 * (gh - 1) as f64 / (h.max(2) - 1) as f64;
        let y0 = (fy.floor() as usize).min(gh - 2);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 * (gw - 1) as f64 / (w.max(2) - 1) as f64;
            let x0 = (fx.floor() as usize).min(gw - 2);
            let tx = fx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            out[y * w + x] = (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x0 + 1))
                + ty * ((1.0 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Smooth depth in `[0, 1]`: a bilinear 4×4 noise field plus a random tilt,
/// min-max normalized.
pub fn depth_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
    let mut d = upsample_grid(&grid, 4, 4, h, w);
    let tilt = rng.random_range(0.0..2.0 * PI);
    let (ty, tx) = (tilt.sin(), tilt.cos());
    for y in 0..h {
        for x in 0..w {
            d[y * w + x] += 0.8 * (ty * y as f64 / h as f64 + tx * x as f64 / w as f64);
        }
    }
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = hi - lo;
    if span > 0.0 {
        d.iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        d.fill(0.0);
    }
    d
}

/// `I = J·t + A·(1 − t)` with `t = exp(−β·d)` for a given depth map.
pub fn haze_with_depth(clean: &Tensor, depth: &[f64], spec: &HazeSpec) -> Result<Tensor> {
    check_image(clean)?;
    let plane = clean.plane();
    ensure!(depth.len() == plane, Dimension, "depth map has {} pixels, image {plane}", depth.len());
    let mut out = clean.clone();
    for c in 0..3 {
        let a = spec.airlight[c];
        for (v, &d) in out.channel_plane_mut(0, c).iter_mut().zip(depth) {
            let t = (-spec.beta * d).exp();
            *v = *v * t + a * (1.0 - t);
        }
    }
    Ok(out)
}

pub fn synth_haze(clean: &Tensor, spec: &HazeSpec, seed: u64) -> Result<Tensor> {
    check_image(clean)?;
    let depth = depth_field(clean.height(), clean.width(), seed);
    haze_with_depth(clean, &depth, spec)
}

/// Normalized `L × L` line kernel: `L` unit-spaced points along the motion
/// direction, each splatted bilinearly.
pub fn line_kernel(spec: &BlurSpec) -> Vec<f64> {
    let l = spec.length;
    let center = (l / 2) as f64;
    let mut k = vec![0.0; l * l];
    let (dy, dx) = (-spec.angle.sin(), spec.angle.cos());
    for i in 0..l {
        let t = i as f64 - center;
        let (py, px) = (center + t * dy, center + t * dx);
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + oy, x0 as isize + ox);
                let wgt = wy * wx;
                if wgt > 0.0 && (0..l as isize).contains(&yy) && (0..l as isize).contains(&xx) {
                    k[yy as usize * l + xx as usize] += wgt;
                }
            }
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn synth_motion_blur(clean: &Tensor, spec: &BlurSpec) -> Result<Tensor> {
    check_image(clean)?;
    let (h, w) = (clean.height(), clean.width());
    let l = spec.length;
    let r = (l / 2) as isize;
    let kernel = line_kernel(spec);
    let taps: Vec<(isize, isize, f64)> = (0..l * l)
        .filter(|&i| kernel[i] != 0.0)
        .map(|i| ((i / l) as isize - r, (i % l) as isize - r, kernel[i]))
        .collect();
    let mut out = Tensor::zeros(clean.shape());
    for c in 0..3 {
        let src = clean.channel_plane(0, c);
        let dst = out.channel_plane_mut(0, c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = taps
                    .iter()
                    .map(|&(oy, ox, k)| k * src[reflect(y as isize + oy, h) * w + reflect(x as isize + ox, w)])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// One snow flake: a rotated ellipse with a solid core and soft rim.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flake {
    pub cy: f64,
    pub cx: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
    pub brightness: f64,
}

impl Flake {
    /// Coverage in `[0, 1]`: 1 inside half the radius, linear falloff to the rim.
    pub fn coverage(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_major;
        let v = (-dx * s + dy * c) / self.semi_minor;
        let r = (u * u + v * v).sqrt();
        ((1.0 - r) / 0.5).clamp(0.0, 1.0)
    }
}

pub fn sample_flakes(h: usize, w: usize, spec: &SnowSpec, seed: u64) -> Vec<Flake> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (spec.density * (h * w) as f64 / 1000.0).round() as usize;
    (0..count)
        .map(|_| {
            let semi_major = rng.random_range(spec.size_range[0]..=spec.size_range[1]);
            Flake {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                semi_major,
                semi_minor: semi_major * rng.random_range(0.5..=1.0),
                angle: rng.random_range(0.0..PI),
                brightness: rng.random_range(0.9..=1.0),
            }
        })
        .collect()
}

/// Alpha-composites `flakes` over `clean` in order.
pub fn composite_flakes(clean: &Tensor, flakes: &[Flake], opacity: f64) -> Result<Tensor> {
    check_image(clean)?;
    let (h, w) = (clean.height(), clean.width());
    let mut out = clean.clone();
    for f in flakes {
        let reach = f.semi_major.ceil() as isize + 1;
        let (y0, y1) = ((f.cy as isize - reach).max(0), (f.cy as isize + reach).min(h as isize - 1));
        let (x0, x1) = ((f.cx as isize - reach).max(0), (f.cx as isize + reach).min(w as isize - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let alpha = opacity * f.coverage(y as f64, x as f64);
                if alpha == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let v = out.at_mut(0, c, y as usize, x as usize);
                    *v = *v * (1.0 - alpha) + f.brightness * alpha;
                }
            }
        }
    }
    Ok(out)
}

pub fn synth_snow(clean: &Tensor, spec: &SnowSpec, seed: u64) -> Result<Tensor> {
    check_image(clean)?;
    let flakes = sample_flakes(clean.height(), clean.width(), spec, seed);
    composite_flakes(clean, &flakes, spec.opacity)
}

/// A procedural RGB scene: a two-colour gradient, a few flat shapes and a
/// smooth texture, all in `[0, 1]`.
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
    let (top, bottom) = (color(0.2, 0.9), color(0.05, 0.6));
    let mut img = Tensor::zeros([1, 3, h, w]);
    let angle = rng.random_range(0.0..2.0 * PI);
    let (ga, gb) = (angle.sin(), angle.cos());
    for y in 0..h {
        for x in 0..w {
            let t = (0.5 + 0.5 * (ga * (2.0 * y as f64 / h as f64 - 1.0) + gb * (2.0 * x as f64 / w as f64 - 1.0)))
                .clamp(0.0, 1.0);
            for c in 0..3 {
                *img.at_mut(0, c, y, x) = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..=7);
    for _ in 0..shapes {
        let fill = [0; 3].map(|_| rng.random_range(0.0..1.0));
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.08..0.3) * h as f64;
        let rx = rng.random_range(0.08..0.3) * w as f64;
        let round = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if round { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        *img.at_mut(0, c, y, x) = fill[c];
                    }
                }
            }
        }
    }
    let texture: Vec<f64> = (0..64).map(|_| rng.random_range(-0.06..0.06)).collect();
    let texture = upsample_grid(&texture, 8, 8, h, w);
    for c in 0..3 {
        for (v, t) in img.channel_plane_mut(0, c).iter_mut().zip(&texture) {
            *v = (*v + t).clamp(0.0, 1.0);
        }
    }
    img
}
