//! Residual building blocks: the context-aware star unit (CSU), the
//! efficient residual star module (ERSM), its D-RSM ablation twin, and a
//! plain two-convolution residual block.
//!
//! ```text
//! ERSM:  x + Conv3( GELU( Conv1(LN x) * GELU(DW(Conv1'(LN x))) ) )
//! D-RSM: x + Conv3( GELU( DW( Conv1(LN x) * GELU(Conv1'(LN x)) ) ) )
//! plain: x + Conv3( GELU( Conv3'(x) ) )
//! ```
//!
//! ERSM and D-RSM share [`BlockParams`], so their parameter counts agree
//! by construction; they differ only in where the depth-wise convolution
//! sits relative to the star product.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::kernels::conv::ConvSpec;
use crate::params::{eval_traced, impl_params, Conv, Init, LayerNormParams};
use crate::tensor::{FeatureMap, Tensor};

/// Epsilon inside the channel layer norm.
pub const LN_EPS: f64 = 1e-6;

/// Std of the normal init used for refinement convolutions.
pub const REFINE_INIT_STD: f64 = 0.02;

/// Parameters of an ERSM or D-RSM block at width `C` with expansion `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub norm: LayerNormParams<P>,
    /// Pointwise `C → C·e`, the plain star branch.
    pub pw_a: Conv<P>,
    /// Pointwise `C → C·e`, the context branch.
    pub pw_b: Conv<P>,
    /// Depth-wise `k_dw × k_dw` on `C·e` channels, no bias.
    pub dw: Conv<P>,
    /// Standard 3×3 `C·e → C`.
    pub refine: Conv<P>,
}
impl_params!(BlockParams { norm, pw_a, pw_b, dw, refine });

impl BlockParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, expansion: usize, dw_kernel: usize, rng: &mut R) -> Self {
        let wide = channels * expansion;
        BlockParams {
            norm: LayerNormParams::identity(channels),
            pw_a: Conv::new(channels, wide, 1, ConvSpec::same(1), true, Init::FanIn, rng),
            pw_b: Conv::new(channels, wide, 1, ConvSpec::same(1), true, Init::FanIn, rng),
            dw: Conv::new(wide, wide, dw_kernel, ConvSpec::depthwise(dw_kernel, wide), false, Init::FanIn, rng),
            refine: Conv::new(wide, channels, 3, ConvSpec::same(3), true, Init::Normal(REFINE_INIT_STD), rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.norm.gain.numel()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.pw_a.macs(h, w) + self.pw_b.macs(h, w) + self.dw.macs(h, w) + self.refine.macs(h, w)
    }
}

/// Two channel-preserving 3×3 convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainBlockParams<P> {
    pub conv1: Conv<P>,
    pub conv2: Conv<P>,
}
impl_params!(PlainBlockParams { conv1, conv2 });

impl PlainBlockParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        PlainBlockParams {
            conv1: Conv::new(channels, channels, 3, ConvSpec::same(3), true, Init::FanIn, rng),
            conv2: Conv::new(channels, channels, 3, ConvSpec::same(3), true, Init::Normal(REFINE_INIT_STD), rng),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w) + self.conv2.macs(h, w)
    }
}

pub fn layer_norm(tape: &Tape, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    tape.layer_norm_channels(x, p.gain, p.bias, LN_EPS)
}

/// `Conv1(x_ln) * GELU(DW(Conv1'(x_ln)))`.
pub fn csu(tape: &Tape, x_ln: Var, p: &BlockParams<Var>) -> Result<Var> {
    let plain = p.pw_a.apply(tape, x_ln)?;
    let context = p.pw_b.apply(tape, x_ln)?;
    let context = p.dw.apply(tape, context)?;
    let context = tape.gelu(context);
    tape.mul(plain, context)
}

pub fn ersm(tape: &Tape, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let normed = layer_norm(tape, x, &p.norm)?;
    let star = csu(tape, normed, p)?;
    let refined = p.refine.apply(tape, tape.gelu(star))?;
    tape.add(x, refined)
}

pub fn drsm(tape: &Tape, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let normed = layer_norm(tape, x, &p.norm)?;
    let plain = p.pw_a.apply(tape, normed)?;
    let gated = p.pw_b.apply(tape, normed)?;
    let star = tape.mul(plain, tape.gelu(gated))?;
    let mixed = p.dw.apply(tape, star)?;
    let refined = p.refine.apply(tape, tape.gelu(mixed))?;
    tape.add(x, refined)
}

pub fn plain_block(tape: &Tape, x: Var, p: &PlainBlockParams<Var>) -> Result<Var> {
    let hidden = tape.gelu(p.conv1.apply(tape, x)?);
    let refined = p.conv2.apply(tape, hidden)?;
    tape.add(x, refined)
}

fn check_width(x: &Tensor, channels: usize) -> Result<()> {
    ensure!(
        x.channels() == channels,
        Dimension,
        "block expects {channels} channels, input has {}",
        x.channels()
    );
    Ok(())
}

/// Channel layer norm with per-channel affine (`gain`, `bias` of length C).
pub fn layer_norm_channels(x: &FeatureMap, gain: &Tensor, bias: &Tensor) -> Result<FeatureMap> {
    let p = LayerNormParams {
        gain: gain.clone(),
        bias: bias.clone(),
    };
    eval_traced(&p, x, |tape, x, p| layer_norm(tape, x, p))
}

pub fn csu_forward(x_ln: &FeatureMap, p: &BlockParams<Tensor>) -> Result<FeatureMap> {
    check_width(x_ln, p.channels())?;
    eval_traced(p, x_ln, csu)
}

pub fn ersm_forward(x: &FeatureMap, p: &BlockParams<Tensor>) -> Result<FeatureMap> {
    check_width(x, p.channels())?;
    eval_traced(p, x, ersm)
}

pub fn drsm_forward(x: &FeatureMap, p: &BlockParams<Tensor>) -> Result<FeatureMap> {
    check_width(x, p.channels())?;
    eval_traced(p, x, drsm)
}

pub fn plain_residual_block_forward(x: &FeatureMap, p: &PlainBlockParams<Tensor>) -> Result<FeatureMap> {
    check_width(x, p.conv1.in_channels())?;
    eval_traced(p, x, plain_block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv::conv2d;
    use crate::kernels::pointwise::gelu;
    use crate::params::{count_scalars, Params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Layer norm written out per location with no shared code.
    fn reference_layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Tensor {
        let [_, c, _, _] = x.shape();
        Tensor::from_fn(x.shape(), |[n, ch, h, w]| {
            let vals: Vec<f64> = (0..c).map(|k| x.at(n, k, h, w)).collect();
            let mean = vals.iter().sum::<f64>() / c as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            gain[ch] * (x.at(n, ch, h, w) - mean) / (var + LN_EPS).sqrt() + bias[ch]
        })
    }

    fn conv(x: &Tensor, c: &Conv<Tensor>) -> Tensor {
        let crate::params::ConvKind::Standard(spec) = c.kind else { unreachable!() };
        conv2d(x, &c.weight, c.bias.as_ref(), spec).unwrap()
    }

    fn noisy(p: &mut BlockParams<Tensor>, r: &mut ChaCha8Rng) {
        p.visit_mut(&mut |t| {
            let noise = Tensor::randn(t.shape(), 0.3, r);
            t.add_assign(&noise).unwrap();
        });
    }

    #[test]
    fn layer_norm_zeroes_constant_locations() {
        let x = Tensor::from_fn([1, 3, 2, 2], |[_, _, h, w]| (h * 2 + w) as f64 * 0.1);
        let y = layer_norm_channels(&x, &Tensor::full([1, 3, 1, 1], 1.0), &Tensor::zeros([1, 3, 1, 1])).unwrap();
        assert!(y.max_abs() < 1e-9, "{}", y.max_abs());
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let x = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = layer_norm_channels(&x, &Tensor::full([1, 2, 1, 1], 1.0), &Tensor::zeros([1, 2, 1, 1])).unwrap();
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
        assert!((expect - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_random_moments_and_reference() {
        let mut r = rng(7);
        let x = Tensor::randn([2, 4, 3, 3], 2.0, &mut r);
        let ones = Tensor::full([1, 4, 1, 1], 1.0);
        let y = layer_norm_channels(&x, &ones, &Tensor::zeros([1, 4, 1, 1])).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let v: Vec<f64> = (0..4).map(|c| y.at(n, c, h, w)).collect();
                    let mean = v.iter().sum::<f64>() / 4.0;
                    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
                    assert!(mean.abs() < 1e-12);
                    assert!((var - 1.0).abs() < 1e-5);
                }
            }
        }
        let gain = [0.5, -1.0, 2.0, 1.5];
        let bias = [0.1, 0.0, -0.3, 0.2];
        let g = Tensor::from_vec([1, 4, 1, 1], gain.to_vec()).unwrap();
        let b = Tensor::from_vec([1, 4, 1, 1], bias.to_vec()).unwrap();
        let y = layer_norm_channels(&x, &g, &b).unwrap();
        assert!(y.max_abs_diff(&reference_layer_norm(&x, &gain, &bias)).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_wrong_affine_length() {
        let x = Tensor::zeros([1, 3, 2, 2]);
        let g = Tensor::full([1, 2, 1, 1], 1.0);
        assert!(layer_norm_channels(&x, &g, &g).is_err());
    }

    #[test]
    fn csu_with_unit_plain_branch_is_gelu_of_context() {
        let mut r = rng(1);
        let mut p = BlockParams::init(4, 2, 7, &mut r);
        p.pw_a.weight.data_mut().fill(0.0);
        p.pw_a.bias.as_mut().unwrap().data_mut().fill(1.0);
        let x = Tensor::randn([1, 4, 5, 5], 1.0, &mut r);
        let got = csu_forward(&x, &p).unwrap();
        let context = conv(&conv(&x, &p.pw_b), &p.dw).map(gelu);
        assert_eq!(got, context);
    }

    #[test]
    fn csu_with_zero_context_preactivation_is_zero() {
        let mut r = rng(2);
        let mut p = BlockParams::init(4, 2, 7, &mut r);
        p.pw_b.zero();
        let x = Tensor::randn([1, 4, 5, 5], 1.0, &mut r);
        let got = csu_forward(&x, &p).unwrap();
        assert_eq!(got.shape(), [1, 8, 5, 5]);
        assert!(got.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csu_matches_straight_line_recomputation() {
        let mut r = rng(3);
        let mut p = BlockParams::init(4, 2, 7, &mut r);
        noisy(&mut p, &mut r);
        let x = Tensor::randn([1, 4, 5, 5], 1.0, &mut r);
        let plain = conv(&x, &p.pw_a);
        let context = conv(&conv(&x, &p.pw_b), &p.dw).map(gelu);
        let want = plain.zip_map(&context, |a, b| a * b).unwrap();
        assert!(csu_forward(&x, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn ersm_follows_the_three_equation_chain() {
        let mut r = rng(4);
        let mut p = BlockParams::init(4, 2, 7, &mut r);
        noisy(&mut p, &mut r);
        let x = Tensor::randn([2, 4, 6, 5], 1.0, &mut r);
        let ln = reference_layer_norm(&x, p.norm.gain.data(), p.norm.bias.data());
        let star = conv(&ln, &p.pw_a)
            .zip_map(&conv(&conv(&ln, &p.pw_b), &p.dw).map(gelu), |a, b| a * b)
            .unwrap();
        let want = x.zip_map(&conv(&star.map(gelu), &p.refine), |a, b| a + b).unwrap();
        assert!(ersm_forward(&x, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_refinement_makes_every_block_the_identity() {
        let mut r = rng(5);
        let x = Tensor::randn([2, 4, 6, 6], 1.0, &mut r);
        let mut p = BlockParams::init(4, 2, 7, &mut r);
        p.refine.zero();
        assert_eq!(ersm_forward(&x, &p).unwrap(), x);
        assert_eq!(drsm_forward(&x, &p).unwrap(), x);
        let mut plain = PlainBlockParams::init(4, &mut r);
        plain.conv2.zero();
        assert_eq!(plain_residual_block_forward(&x, &plain).unwrap(), x);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let mut r = rng(6);
        let x = Tensor::zeros([1, 4, 5, 5]);
        let mut p = BlockParams::init(4, 2, 7, &mut r);
        p.pw_a.bias.as_mut().unwrap().data_mut().fill(0.0);
        p.pw_b.bias.as_mut().unwrap().data_mut().fill(0.0);
        p.refine.bias.as_mut().unwrap().data_mut().fill(0.0);
        assert!(ersm_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(drsm_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
        let mut plain = PlainBlockParams::init(4, &mut r);
        plain.conv1.bias.as_mut().unwrap().data_mut().fill(0.0);
        plain.conv2.bias.as_mut().unwrap().data_mut().fill(0.0);
        assert!(plain_residual_block_forward(&x, &plain).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drsm_differs_from_ersm_but_shares_parameter_count() {
        let mut r = rng(8);
        let mut p = BlockParams::init(4, 2, 7, &mut r);
        noisy(&mut p, &mut r);
        let x = Tensor::randn([1, 4, 8, 8], 1.0, &mut r);
        let a = ersm_forward(&x, &p).unwrap();
        let b = drsm_forward(&x, &p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
        // identical parameter sets by type; count once for the record
        assert_eq!(count_scalars(&p), 2 * 4 + 2 * (4 * 8 + 8) + 8 * 49 + (8 * 4 * 9 + 4));
    }

    #[test]
    fn plain_block_matches_two_conv_recomputation() {
        let mut r = rng(9);
        let mut p = PlainBlockParams::init(3, &mut r);
        p.conv2.weight = Tensor::randn(p.conv2.weight.shape(), 0.2, &mut r);
        let x = Tensor::randn([2, 3, 5, 4], 1.0, &mut r);
        let want = x
            .zip_map(&conv(&conv(&x, &p.conv1).map(gelu), &p.conv2), |a, b| a + b)
            .unwrap();
        assert!(plain_residual_block_forward(&x, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn blocks_reject_wrong_width() {
        let mut r = rng(10);
        let p = BlockParams::init(4, 2, 7, &mut r);
        let x = Tensor::zeros([1, 3, 4, 4]);
        assert!(ersm_forward(&x, &p).is_err());
        assert!(drsm_forward(&x, &p).is_err());
    }
}
