//! Dynamic strip attention and the large dynamic integration module (LDIM).
//!
//! A strip-attention (SA) stage predicts `K` weights per pixel with a 1×1
//! convolution + softmax, then replaces every pixel by the weighted sum of
//! the `K` pixels of its horizontal (or vertical) strip. The dilated stage
//! (DSA) does the same with taps spaced `dr = (K + 1) / 2` apart. SA then DSA
//! along one axis is an LDSI; H-LDSI followed by V-LDSI per channel group,
//! plus a residual skip, is the LDIM.
//!
//! Weights are shared by all channels of a group and are strictly positive,
//! so each stage is a per-pixel convex combination of zero-padded samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::kernels::conv::ConvSpec;
pub use crate::kernels::strip::StripAxis;
use crate::params::{eval_traced, impl_params, Conv, Init, Params};
use crate::tensor::{FeatureMap, Tensor};

/// Default strip sizes of the two LDIM channel groups.
pub const DEFAULT_STRIPS: [usize; 2] = [7, 11];

/// Per-pixel attention weights over `K` strip taps: `[N, K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StripWeights {
    pub values: Tensor,
    pub group_id: usize,
}

impl StripWeights {
    pub fn new(values: Tensor) -> Result<Self> {
        ensure!(
            values.channels() % 2 == 1,
            Config,
            "strip size must be odd, got {}",
            values.channels()
        );
        Ok(StripWeights { values, group_id: 0 })
    }

    pub fn strip_size(&self) -> usize {
        self.values.channels()
    }
}

/// Dilation of the DSA stage paired with an SA stage of strip size `k`.
pub fn dilation_for(k: usize) -> usize {
    (k + 1) / 2
}

/// One-axis extent of an SA stage followed by its dilated DSA stage.
pub fn receptive_extent(k: usize) -> usize {
    k + dilation_for(k) * (k - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripGroup {
    pub channels: usize,
    pub strip: usize,
}

impl StripGroup {
    pub fn dilation(&self) -> usize {
        dilation_for(self.strip)
    }
}

/// Channel grouping of an LDIM, applied H-then-V within each group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LdimConfig {
    pub groups: Vec<StripGroup>,
}

impl LdimConfig {
    /// Splits `channels` into `strips.len()` near-equal groups; earlier groups
    /// take the remainder.
    pub fn split(channels: usize, strips: &[usize]) -> Result<Self> {
        ensure!(!strips.is_empty(), Config, "LDIM needs at least one strip size");
        ensure!(
            channels >= strips.len(),
            Config,
            "cannot split {channels} channels into {} groups",
            strips.len()
        );
        let base = channels / strips.len();
        let extra = channels % strips.len();
        let groups = strips
            .iter()
            .enumerate()
            .map(|(i, &strip)| StripGroup {
                channels: base + usize::from(i < extra),
                strip,
            })
            .collect();
        let cfg = LdimConfig { groups };
        cfg.validate(channels)?;
        Ok(cfg)
    }

    pub fn channels(&self) -> usize {
        self.groups.iter().map(|g| g.channels).sum()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        ensure!(!self.groups.is_empty(), Config, "LDIM has no groups");
        for g in &self.groups {
            ensure!(g.strip % 2 == 1, Config, "strip size must be odd, got {}", g.strip);
            ensure!(g.channels >= 1, Config, "empty LDIM channel group");
        }
        ensure!(
            self.channels() == channels,
            Config,
            "LDIM groups cover {} channels, features have {channels}",
            self.channels()
        );
        Ok(())
    }
}

/// Weight generators of one LDSI: a 1×1 convolution to `K` logits per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LdsiParams<P> {
    pub sa: Conv<P>,
    pub dsa: Conv<P>,
}
impl_params!(LdsiParams { sa, dsa });

#[derive(Clone, Debug, PartialEq)]
pub struct LdimGroupParams<P> {
    pub horizontal: LdsiParams<P>,
    pub vertical: LdsiParams<P>,
}
impl_params!(LdimGroupParams { horizontal, vertical });

#[derive(Clone, Debug, PartialEq)]
pub struct LdimParams<P> {
    pub config: LdimConfig,
    pub groups: Vec<LdimGroupParams<P>>,
}

impl<P> Params<P> for LdimParams<P> {
    type With<U> = LdimParams<U>;

    fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> LdimParams<U> {
        LdimParams {
            config: self.config.clone(),
            groups: self.groups.map_ref(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.groups.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.groups.visit_mut(f);
    }
}

fn generator<R: Rng + ?Sized>(channels: usize, strip: usize, rng: &mut R) -> Conv<Tensor> {
    Conv::new(channels, strip, 1, ConvSpec::same(1), true, Init::FanIn, rng)
}

impl LdsiParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, strip: usize, rng: &mut R) -> Self {
        LdsiParams {
            sa: generator(channels, strip, rng),
            dsa: generator(channels, strip, rng),
        }
    }

    pub fn strip_size(&self) -> usize {
        self.sa.out_channels()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.sa.in_channels() as u64;
        let k = self.strip_size() as u64;
        let strips = 2 * k * c * (h * w) as u64;
        self.sa.macs(h, w) + self.dsa.macs(h, w) + strips
    }
}

impl LdimParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(config: LdimConfig, rng: &mut R) -> Self {
        let groups = config
            .groups
            .iter()
            .map(|g| LdimGroupParams {
                horizontal: LdsiParams::init(g.channels, g.strip, rng),
                vertical: LdsiParams::init(g.channels, g.strip, rng),
            })
            .collect();
        LdimParams { config, groups }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.groups
            .iter()
            .map(|g| g.horizontal.macs(h, w) + g.vertical.macs(h, w))
            .sum()
    }
}

/// 1×1 generator followed by a softmax across the `K` logits.
pub fn strip_weights(tape: &Tape, x: Var, generator: &Conv<Var>) -> Result<Var> {
    let logits = generator.apply(tape, x)?;
    let k = tape.shape(logits)[1];
    ensure!(k % 2 == 1, Config, "strip size must be odd, got {k}");
    Ok(tape.softmax_channels(logits))
}

/// SA (dilation 1) then DSA (dilation `(K+1)/2`) along `axis`.
pub fn ldsi(tape: &Tape, x: Var, p: &LdsiParams<Var>, axis: StripAxis) -> Result<Var> {
    let near = strip_weights(tape, x, &p.sa)?;
    let k = tape.shape(near)[1];
    let x = tape.strip_apply(x, near, axis, 1)?;
    let far = strip_weights(tape, x, &p.dsa)?;
    ensure!(
        tape.shape(far)[1] == k,
        Config,
        "SA and DSA strip sizes differ within one LDSI"
    );
    tape.strip_apply(x, far, axis, dilation_for(k))
}

/// `x + V-LDSI(H-LDSI(x))`, group by group.
pub fn ldim(tape: &Tape, x: Var, p: &LdimParams<Var>) -> Result<Var> {
    p.config.validate(tape.shape(x)[1])?;
    let mut outs = Vec::with_capacity(p.groups.len());
    let mut start = 0;
    for (group, gp) in p.config.groups.iter().zip(&p.groups) {
        let part = if p.groups.len() == 1 {
            x
        } else {
            tape.slice_channels(x, start, group.channels)?
        };
        start += group.channels;
        let h = ldsi(tape, part, &gp.horizontal, StripAxis::Horizontal)?;
        outs.push(ldsi(tape, h, &gp.vertical, StripAxis::Vertical)?);
    }
    let mixed = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_channels(&outs)?
    };
    tape.add(x, mixed)
}

pub fn generate_strip_weights(x: &FeatureMap, generator: &Conv<Tensor>, strip: usize) -> Result<StripWeights> {
    ensure!(strip % 2 == 1, Config, "strip size must be odd, got {strip}");
    ensure!(
        generator.out_channels() == strip,
        Config,
        "generator emits {} logits, strip size is {strip}",
        generator.out_channels()
    );
    let values = eval_traced(generator, x, |tape, x, g| strip_weights(tape, x, g))?;
    StripWeights::new(values)
}

pub fn strip_apply(x: &FeatureMap, weights: &StripWeights, axis: StripAxis, dilation: usize) -> Result<FeatureMap> {
    crate::kernels::strip::strip_apply(x, &weights.values, axis, dilation)
}

pub fn ldsi_forward(x: &FeatureMap, p: &LdsiParams<Tensor>, axis: StripAxis, strip: usize) -> Result<FeatureMap> {
    ensure!(strip % 2 == 1, Config, "strip size must be odd, got {strip}");
    ensure!(
        p.strip_size() == strip && p.dsa.out_channels() == strip,
        Config,
        "LDSI generators emit {} logits, strip size is {strip}",
        p.strip_size()
    );
    eval_traced(p, x, |tape, x, p| ldsi(tape, x, p, axis))
}

pub fn ldim_forward(x: &FeatureMap, cfg: &LdimConfig, p: &LdimParams<Tensor>) -> Result<FeatureMap> {
    cfg.validate(x.channels())?;
    ensure!(
        *cfg == p.config,
        Config,
        "LDIM parameters were built for {:?}, asked to run {:?}",
        p.config,
        cfg
    );
    eval_traced(p, x, ldim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// A generator whose logits are a fixed per-tap bias.
    fn constant_generator(channels: usize, logits: &[f64]) -> Conv<Tensor> {
        let mut g = generator(channels, logits.len(), &mut rng(0));
        g.weight.data_mut().fill(0.0);
        g.bias.as_mut().unwrap().data_mut().copy_from_slice(logits);
        g
    }

    fn delta_logits(k: usize) -> Vec<f64> {
        (0..k).map(|i| if i == k / 2 { 0.0 } else { -1e4 }).collect()
    }

    #[test]
    fn receptive_extent_closed_form() {
        assert_eq!(receptive_extent(1), 1);
        assert_eq!(receptive_extent(3), 7);
        assert_eq!(receptive_extent(5), 17);
        assert_eq!(receptive_extent(7), 31);
        assert_eq!(receptive_extent(11), 71);
    }

    #[test]
    fn zero_logits_give_uniform_weights() {
        let x = Tensor::randn([1, 3, 4, 4], 1.0, &mut rng(1));
        let w = generate_strip_weights(&x, &constant_generator(3, &[0.0; 5]), 5).unwrap();
        assert!(w.values.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_tap_weights_are_exactly_one() {
        let mut r = rng(2);
        let x = Tensor::randn([1, 3, 4, 4], 1.0, &mut r);
        let w = generate_strip_weights(&x, &generator(3, 1, &mut r), 1).unwrap();
        assert!(w.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_weights_are_normalized() {
        let mut r = rng(3);
        let x = Tensor::randn([2, 4, 5, 6], 3.0, &mut r);
        let w = generate_strip_weights(&x, &generator(4, 7, &mut r), 7).unwrap();
        for n in 0..2 {
            for h in 0..5 {
                for xx in 0..6 {
                    let total: f64 = (0..7).map(|k| w.values.at(n, k, h, xx)).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                    assert!((0..7).all(|k| w.values.at(n, k, h, xx) > 0.0));
                }
            }
        }
    }

    #[test]
    fn even_strip_is_a_configuration_error() {
        let mut r = rng(4);
        let x = Tensor::randn([1, 2, 3, 3], 1.0, &mut r);
        assert!(generate_strip_weights(&x, &generator(2, 4, &mut r), 4).is_err());
        assert!(LdimConfig::split(4, &[7, 6]).is_err());
    }

    #[test]
    fn identity_strips() {
        let mut r = rng(5);
        let x = Tensor::randn([2, 3, 6, 7], 1.0, &mut r);
        let single = StripWeights::new(Tensor::full([2, 1, 6, 7], 1.0)).unwrap();
        let center = StripWeights::new(Tensor::from_fn([2, 5, 6, 7], |[_, k, _, _]| f64::from(k == 2))).unwrap();
        for axis in [StripAxis::Horizontal, StripAxis::Vertical] {
            assert_eq!(strip_apply(&x, &single, axis, 3).unwrap(), x);
            assert_eq!(strip_apply(&x, &center, axis, 2).unwrap(), x);
        }
        assert!(strip_apply(&x, &single, StripAxis::Horizontal, 0).is_err());
    }

    #[test]
    fn uniform_ldsi_keeps_interior_constants() {
        let c = 0.7;
        let x = Tensor::full([1, 2, 1, 64], c);
        let p = LdsiParams {
            sa: constant_generator(2, &[0.0; 3]),
            dsa: constant_generator(2, &[0.0; 3]),
        };
        let y = ldsi_forward(&x, &p, StripAxis::Horizontal, 3).unwrap();
        // far enough from the zero-padded borders to see only the constant
        let margin = receptive_extent(3) / 2;
        for w in margin..64 - margin {
            assert!((y.at(0, 0, 0, w) - c).abs() < 1e-15);
        }
    }

    #[test]
    fn single_tap_ldsi_is_identity() {
        let mut r = rng(6);
        let x = Tensor::randn([1, 3, 5, 5], 1.0, &mut r);
        let p = LdsiParams::init(3, 1, &mut r);
        assert_eq!(ldsi_forward(&x, &p, StripAxis::Vertical, 1).unwrap(), x);
    }

    #[test]
    fn impulse_response_of_ldsi_spans_the_receptive_extent() {
        let mut r = rng(7);
        let mut x = Tensor::zeros([1, 1, 1, 64]);
        *x.at_mut(0, 0, 0, 32) = 1.0;
        let p = LdsiParams::init(1, 7, &mut r);
        let y = ldsi_forward(&x, &p, StripAxis::Horizontal, 7).unwrap();
        let support: Vec<usize> = (0..64).filter(|&w| y.at(0, 0, 0, w) != 0.0).collect();
        assert_eq!(support.len(), 31);
        assert_eq!(support.first(), Some(&(32 - 15)));
        assert_eq!(support.last(), Some(&(32 + 15)));
    }

    #[test]
    fn delta_weights_make_ldim_double_its_input() {
        let mut r = rng(8);
        let cfg = LdimConfig::split(5, &[3, 5]).unwrap();
        assert_eq!(cfg.groups[0].channels, 3);
        let mut p = LdimParams::init(cfg.clone(), &mut r);
        for (g, group) in p.groups.iter_mut().zip(&cfg.groups) {
            for gen in [&mut g.horizontal.sa, &mut g.horizontal.dsa, &mut g.vertical.sa, &mut g.vertical.dsa] {
                *gen = constant_generator(group.channels, &delta_logits(group.strip));
            }
        }
        let x = Tensor::randn([2, 5, 6, 6], 1.0, &mut r);
        let y = ldim_forward(&x, &cfg, &p).unwrap();
        assert!(y.max_abs_diff(&x.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = rng(9);
        let cfg = LdimConfig::split(4, &DEFAULT_STRIPS).unwrap();
        let p = LdimParams::init(cfg.clone(), &mut r);
        let y = ldim_forward(&Tensor::zeros([1, 4, 8, 8]), &cfg, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ldim_rejects_mismatched_split() {
        let mut r = rng(10);
        let cfg = LdimConfig::split(4, &DEFAULT_STRIPS).unwrap();
        let p = LdimParams::init(cfg.clone(), &mut r);
        assert!(ldim_forward(&Tensor::zeros([1, 6, 8, 8]), &cfg, &p).is_err());
        let other = LdimConfig::split(4, &[7, 7]).unwrap();
        assert!(ldim_forward(&Tensor::zeros([1, 4, 8, 8]), &other, &p).is_err());
    }
}
