//! Residual star attention module: `x + Conv3(LDIM(GELU(CSU(LN x))))`.
//!
//! The LDIM runs on the expanded `C·e` channels between the star unit and
//! the 3×3 projection back to `C`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{csu, layer_norm, BlockParams};
use crate::error::{ensure, Result};
use crate::params::{eval_traced, impl_params};
use crate::strip_attention::{ldim, LdimConfig, LdimParams};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RsamParams<P> {
    pub block: BlockParams<P>,
    pub ldim: LdimParams<P>,
}
impl_params!(RsamParams { block, ldim });

impl RsamParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        expansion: usize,
        dw_kernel: usize,
        strips: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let block = BlockParams::init(channels, expansion, dw_kernel, rng);
        let cfg = LdimConfig::split(channels * expansion, strips)?;
        Ok(RsamParams {
            block,
            ldim: LdimParams::init(cfg, rng),
        })
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.block.macs(h, w) + self.ldim.macs(h, w)
    }
}

pub fn rsam(tape: &Tape, x: Var, p: &RsamParams<Var>) -> Result<Var> {
    let normed = layer_norm(tape, x, &p.block.norm)?;
    let star = tape.gelu(csu(tape, normed, &p.block)?);
    let mixed = ldim(tape, star, &p.ldim)?;
    let refined = p.block.refine.apply(tape, mixed)?;
    tape.add(x, refined)
}

/// `cfg` describes the LDIM on the expanded width and must match `p.ldim`.
pub fn rsam_forward(x: &FeatureMap, cfg: &LdimConfig, p: &RsamParams<Tensor>) -> Result<FeatureMap> {
    let channels = p.block.channels();
    ensure!(
        x.channels() == channels,
        Dimension,
        "RSAM expects {channels} channels, input has {}",
        x.channels()
    );
    ensure!(
        *cfg == p.ldim.config,
        Config,
        "RSAM LDIM was built for {:?}, asked to run {:?}",
        p.ldim.config,
        cfg
    );
    eval_traced(p, x, rsam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{csu_forward, layer_norm_channels};
    use crate::kernels::conv::{conv2d, ConvSpec};
    use crate::kernels::pointwise::gelu;
    use crate::params::count_scalars;
    use crate::strip_attention::{ldim_forward, DEFAULT_STRIPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ChaCha8Rng, RsamParams<Tensor>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = RsamParams::init(4, 2, 7, &DEFAULT_STRIPS, &mut r).unwrap();
        (r, p)
    }

    #[test]
    fn zero_projection_is_identity() {
        let (mut r, mut p) = setup(0);
        p.block.refine.zero();
        let x = Tensor::randn([2, 4, 8, 8], 1.0, &mut r);
        assert_eq!(rsam_forward(&x, &p.ldim.config.clone(), &p).unwrap(), x);
    }

    #[test]
    fn zero_input_and_biases_give_zero() {
        let (_, mut p) = setup(1);
        for c in [&mut p.block.pw_a, &mut p.block.pw_b, &mut p.block.refine] {
            c.bias.as_mut().unwrap().data_mut().fill(0.0);
        }
        let y = rsam_forward(&Tensor::zeros([1, 4, 6, 6]), &p.ldim.config.clone(), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_manual_composition() {
        let (mut r, p) = setup(2);
        let x = Tensor::randn([1, 4, 8, 8], 1.0, &mut r);
        let normed = layer_norm_channels(&x, &p.block.norm.gain, &p.block.norm.bias).unwrap();
        let star = csu_forward(&normed, &p.block).unwrap().map(gelu);
        let mixed = ldim_forward(&star, &p.ldim.config, &p.ldim).unwrap();
        let refined = conv2d(&mixed, &p.block.refine.weight, p.block.refine.bias.as_ref(), ConvSpec::same(3)).unwrap();
        let mut expected = x.clone();
        expected.add_assign(&refined).unwrap();
        let y = rsam_forward(&x, &p.ldim.config, &p).unwrap();
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn ldim_runs_on_the_expanded_width() {
        let (_, p) = setup(3);
        assert_eq!(p.ldim.config.channels(), 8);
        assert!(count_scalars(&p) > count_scalars(&p.block));
    }

    #[test]
    fn rejects_wrong_width() {
        let (_, p) = setup(4);
        assert!(rsam_forward(&Tensor::zeros([1, 3, 4, 4]), &p.ldim.config, &p).is_err());
    }
}
