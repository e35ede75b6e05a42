//! The six-scale U-shaped restoration network.
//!
//! ```text
//! scale 1 (C,  H)    stem → blocks → LDIM ─────────────── skip ─┐
//! scale 2 (2C, H/2)  down ⊕ inject(x/2) → blocks → LDIM ─ skip ┐ │
//! scale 3 (4C, H/4)  down ⊕ inject(x/4) → blocks → LDIM        │ │
//! scale 4 (4C, H/4)  blocks → LDIM → head + x/4                │ │
//! scale 5 (2C, H/2)  up ⊕ skip → fuse → blocks → LDIM → head + x/2
//! scale 6 (C,  H)    up ⊕ skip → fuse → blocks → LDIM → head + x
//! ```
//!
//! `⊕` is channel concatenation followed by a 1×1 fusion convolution. Heads
//! start at zero, so a fresh model returns its (pooled) inputs unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{drsm, ersm, plain_block, BlockParams, PlainBlockParams};
use crate::error::{ensure, Result};
use crate::kernels::conv::ConvSpec;
use crate::params::{count_scalars, impl_params, trace, Conv, Init, Params};
use crate::rsam::{rsam, RsamParams};
use crate::strip_attention::{ldim, LdimConfig, LdimParams, DEFAULT_STRIPS};
use crate::tensor::Tensor;

/// Base width of the paper-scale profile, sized so the dehazing model lands
/// near 4.26 M parameters and 43.51 GMACs at 256×256.
pub const PAPER_BASE_CHANNELS: usize = 38;
pub const DESK_BASE_CHANNELS: usize = 8;

/// Number of encoder (and decoder) scales.
pub const SCALES: usize = 3;

/// Published size of the full dehazing model (ERSM + LDIM, N = 3):
/// parameters and MACs for one 256×256 input.
pub const DEHAZE_REFERENCE_PARAMS: f64 = 4.26e6;
pub const DEHAZE_REFERENCE_MACS: f64 = 43.51e9;
/// Published parameter count of the plain-block baseline without LDIM.
pub const BASELINE_REFERENCE_PARAMS: f64 = 4.29e6;
/// Accepted relative deviation from the published sizes.
pub const REFERENCE_BAND: f64 = 0.15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Ersm,
    Drsm,
    Plain,
    Rsam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Dehaze,
    Deblur,
    Desnow,
}

impl Task {
    pub fn blocks_per_scale(self) -> usize {
        match self {
            Task::Dehaze => 3,
            Task::Deblur => 15,
            Task::Desnow => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn base_channels(self) -> usize {
        match self {
            Profile::Desk => DESK_BASE_CHANNELS,
            Profile::Paper => PAPER_BASE_CHANNELS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks_per_scale: usize,
    pub block: BlockKind,
    pub use_ldim: bool,
    /// Strip size of each LDIM channel group.
    pub ldim_strips: Vec<usize>,
    pub dw_kernel: usize,
    pub expansion: usize,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_task(Task::Dehaze, Profile::Desk)
    }
}

impl ModelConfig {
    pub fn for_task(task: Task, profile: Profile) -> Self {
        ModelConfig {
            base_channels: profile.base_channels(),
            blocks_per_scale: task.blocks_per_scale(),
            block: BlockKind::Ersm,
            use_ldim: true,
            ldim_strips: DEFAULT_STRIPS.to_vec(),
            dw_kernel: 7,
            expansion: 2,
            image_channels: 3,
        }
    }

    /// Channel width of encoder scale `s` (0-based), mirrored by the decoder.
    pub fn width(&self, s: usize) -> usize {
        self.base_channels << s
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_channels >= 1, Config, "base_channels must be at least 1");
        ensure!(self.blocks_per_scale >= 1, Config, "blocks_per_scale must be at least 1");
        ensure!(self.image_channels >= 1, Config, "image_channels must be at least 1");
        ensure!(self.expansion >= 1, Config, "expansion must be at least 1");
        ensure!(
            self.dw_kernel % 2 == 1,
            Config,
            "dw_kernel must be odd, got {}",
            self.dw_kernel
        );
        if self.use_ldim || self.block == BlockKind::Rsam {
            LdimConfig::split(self.base_channels, &self.ldim_strips)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block<P> {
    Ersm(BlockParams<P>),
    Drsm(BlockParams<P>),
    Plain(PlainBlockParams<P>),
    Rsam(RsamParams<P>),
}

impl<P> Params<P> for Block<P> {
    type With<U> = Block<U>;

    fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> Block<U> {
        match self {
            Block::Ersm(p) => Block::Ersm(p.map_ref(f)),
            Block::Drsm(p) => Block::Drsm(p.map_ref(f)),
            Block::Plain(p) => Block::Plain(p.map_ref(f)),
            Block::Rsam(p) => Block::Rsam(p.map_ref(f)),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        match self {
            Block::Ersm(p) | Block::Drsm(p) => p.visit(f),
            Block::Plain(p) => p.visit(f),
            Block::Rsam(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        match self {
            Block::Ersm(p) | Block::Drsm(p) => p.visit_mut(f),
            Block::Plain(p) => p.visit_mut(f),
            Block::Rsam(p) => p.visit_mut(f),
        }
    }
}

impl Block<Tensor> {
    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(match cfg.block {
            BlockKind::Ersm => Block::Ersm(BlockParams::init(channels, cfg.expansion, cfg.dw_kernel, rng)),
            BlockKind::Drsm => Block::Drsm(BlockParams::init(channels, cfg.expansion, cfg.dw_kernel, rng)),
            BlockKind::Plain => Block::Plain(PlainBlockParams::init(channels, rng)),
            BlockKind::Rsam => Block::Rsam(RsamParams::init(
                channels,
                cfg.expansion,
                cfg.dw_kernel,
                &cfg.ldim_strips,
                rng,
            )?),
        })
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Block::Ersm(p) | Block::Drsm(p) => p.macs(h, w),
            Block::Plain(p) => p.macs(h, w),
            Block::Rsam(p) => p.macs(h, w),
        }
    }

    /// Refinement convolutions whose zeroing turns the block into the identity.
    pub fn refinement_mut(&mut self) -> &mut Conv<Tensor> {
        match self {
            Block::Ersm(p) | Block::Drsm(p) => &mut p.refine,
            Block::Plain(p) => &mut p.conv2,
            Block::Rsam(p) => &mut p.block.refine,
        }
    }
}

pub fn apply_block(tape: &Tape, x: Var, block: &Block<Var>) -> Result<Var> {
    match block {
        Block::Ersm(p) => ersm(tape, x, p),
        Block::Drsm(p) => drsm(tape, x, p),
        Block::Plain(p) => plain_block(tape, x, p),
        Block::Rsam(p) => rsam(tape, x, p),
    }
}

/// Shallow features from a pooled input image, fused into the scale stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection<P> {
    pub stem: Conv<P>,
    pub fuse: Conv<P>,
}
impl_params!(Injection { stem, fuse });

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderScale<P> {
    pub inject: Option<Injection<P>>,
    pub blocks: Vec<Block<P>>,
    pub ldim: Option<LdimParams<P>>,
    /// Strided convolution into the next scale; absent at the bottleneck.
    pub down: Option<Conv<P>>,
}
impl_params!(EncoderScale { inject, blocks, ldim, down });

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderScale<P> {
    /// Transposed convolution from the coarser scale; absent at the bottleneck.
    pub up: Option<Conv<P>>,
    pub fuse: Option<Conv<P>>,
    pub blocks: Vec<Block<P>>,
    pub ldim: Option<LdimParams<P>>,
    pub head: Conv<P>,
}
impl_params!(DecoderScale { up, fuse, blocks, ldim, head });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub stem: Conv<P>,
    /// Finest scale first.
    pub encoder: Vec<EncoderScale<P>>,
    /// Coarsest scale first.
    pub decoder: Vec<DecoderScale<P>>,
}
impl_params!(ModelParams { stem, encoder, decoder });

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let img = cfg.image_channels;
        let same3 = ConvSpec::same(3);
        let same1 = ConvSpec::same(1);
        let blocks = |c: usize, rng: &mut R| -> Result<Vec<Block<Tensor>>> {
            (0..cfg.blocks_per_scale).map(|_| Block::init(cfg, c, rng)).collect()
        };
        let ldim_at = |c: usize, rng: &mut R| -> Result<Option<LdimParams<Tensor>>> {
            if !cfg.use_ldim {
                return Ok(None);
            }
            Ok(Some(LdimParams::init(LdimConfig::split(c, &cfg.ldim_strips)?, rng)))
        };

        let stem = Conv::new(img, cfg.width(0), 3, same3, true, Init::FanIn, rng);
        let mut encoder = Vec::with_capacity(SCALES);
        for s in 0..SCALES {
            let c = cfg.width(s);
            let inject = (s > 0).then(|| Injection {
                stem: Conv::new(img, c, 3, same3, true, Init::FanIn, rng),
                fuse: Conv::new(2 * c, c, 1, same1, true, Init::FanIn, rng),
            });
            let blocks = blocks(c, rng)?;
            let ldim = ldim_at(c, rng)?;
            let down = (s + 1 < SCALES).then(|| Conv::new(c, 2 * c, 3, ConvSpec::strided(3, 2), true, Init::FanIn, rng));
            encoder.push(EncoderScale {
                inject,
                blocks,
                ldim,
                down,
            });
        }

        let mut decoder = Vec::with_capacity(SCALES);
        for s in (0..SCALES).rev() {
            let c = cfg.width(s);
            let bottleneck = s + 1 == SCALES;
            let up = (!bottleneck).then(|| Conv::transposed(2 * c, c, 4, 2, 1, Init::FanIn, rng));
            let fuse = (!bottleneck).then(|| Conv::new(2 * c, c, 1, same1, true, Init::FanIn, rng));
            let blocks = blocks(c, rng)?;
            let ldim = ldim_at(c, rng)?;
            let head = Conv::new(c, img, 3, same3, true, Init::Zeros, rng);
            decoder.push(DecoderScale {
                up,
                fuse,
                blocks,
                ldim,
                head,
            });
        }
        Ok(ModelParams { stem, encoder, decoder })
    }
}

/// Restored images (or their targets), finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutputs {
    pub full: Tensor,
    pub half: Tensor,
    pub quarter: Tensor,
}

impl ScaleOutputs {
    /// Full, half and quarter resolution average-pooled copies of `image`.
    pub fn pyramid(image: &Tensor) -> Result<Self> {
        check_divisible(image)?;
        let half = image.avg_pool2()?;
        let quarter = half.avg_pool2()?;
        Ok(ScaleOutputs {
            full: image.clone(),
            half,
            quarter,
        })
    }

    pub fn as_array(&self) -> [&Tensor; SCALES] {
        [&self.full, &self.half, &self.quarter]
    }

    pub fn clamped(&self) -> Self {
        ScaleOutputs {
            full: self.full.clamp(0.0, 1.0),
            half: self.half.clamp(0.0, 1.0),
            quarter: self.quarter.clamp(0.0, 1.0),
        }
    }
}

fn check_divisible(image: &Tensor) -> Result<()> {
    let [_, _, h, w] = image.shape();
    ensure!(
        h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0,
        Input,
        "image size {h}×{w} is not divisible by 4"
    );
    Ok(())
}

/// Records a forward pass; returns the full, half and quarter outputs.
pub fn forward_traced(tape: &Tape, params: &ModelParams<Var>, images: &Tensor) -> Result<[Var; SCALES]> {
    let pyramid = ScaleOutputs::pyramid(images)?;
    let inputs = pyramid.as_array().map(|t| tape.leaf(t.clone()));
    let run_scale = |mut f: Var, blocks: &[Block<Var>], mixer: &Option<LdimParams<Var>>| -> Result<Var> {
        for b in blocks {
            f = apply_block(tape, f, b)?;
        }
        match mixer {
            Some(p) => ldim(tape, f, p),
            None => Ok(f),
        }
    };

    let mut f = params.stem.apply(tape, inputs[0])?;
    let mut skips = Vec::with_capacity(SCALES);
    for (s, enc) in params.encoder.iter().enumerate() {
        if let Some(inj) = &enc.inject {
            let shallow = inj.stem.apply(tape, inputs[s])?;
            let joined = tape.concat_channels(&[f, shallow])?;
            f = inj.fuse.apply(tape, joined)?;
        }
        f = run_scale(f, &enc.blocks, &enc.ldim)?;
        skips.push(f);
        if let Some(down) = &enc.down {
            f = down.apply(tape, f)?;
        }
    }

    let mut outputs = [inputs[0]; SCALES];
    for (i, dec) in params.decoder.iter().enumerate() {
        let s = SCALES - 1 - i;
        if let (Some(up), Some(fuse)) = (&dec.up, &dec.fuse) {
            let upsampled = up.apply(tape, f)?;
            let joined = tape.concat_channels(&[upsampled, skips[s]])?;
            f = fuse.apply(tape, joined)?;
        }
        f = run_scale(f, &dec.blocks, &dec.ldim)?;
        let residual = dec.head.apply(tape, f)?;
        outputs[s] = tape.add(residual, inputs[s])?;
    }
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn forward(&self, images: &Tensor) -> Result<ScaleOutputs> {
        self.check_input(images)?;
        let tape = Tape::new();
        let vars = trace(&tape, &self.params);
        let [full, half, quarter] = forward_traced(&tape, &vars, images)?;
        let take = |v: Var| tape.value(v).as_ref().clone();
        Ok(ScaleOutputs {
            full: take(full),
            half: take(half),
            quarter: take(quarter),
        })
    }

    pub fn check_input(&self, images: &Tensor) -> Result<()> {
        ensure!(
            images.channels() == self.config.image_channels,
            Dimension,
            "model expects {} image channels, got {}",
            self.config.image_channels,
            images.channels()
        );
        check_divisible(images)
    }

    /// Zeroes the output heads so every output equals its pooled input.
    pub fn zero_heads(&mut self) {
        for dec in &mut self.params.decoder {
            dec.head.zero();
        }
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<Tensor>> {
        let enc = self.params.encoder.iter_mut().flat_map(|e| e.blocks.iter_mut());
        let dec = self.params.decoder.iter_mut().flat_map(|d| d.blocks.iter_mut());
        enc.chain(dec)
    }
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Model {
        config: cfg.clone(),
        params: ModelParams::init(cfg, &mut rng)?,
    })
}

pub fn forward_multiscale(model: &Model, images: &Tensor) -> Result<ScaleOutputs> {
    model.forward(images)
}

pub fn count_parameters(model: &Model) -> usize {
    count_scalars(&model.params)
}

/// Multiply-accumulates for one `3×h×w` forward pass (convolutions, weight
/// generators and strip gathers).
pub fn count_macs(model: &Model, h: usize, w: usize) -> Result<u64> {
    check_divisible(&Tensor::zeros([1, 1, h, w]))?;
    let p = &model.params;
    let size = |s: usize| (h >> s, w >> s);
    let scale_macs = |blocks: &[Block<Tensor>], mixer: &Option<LdimParams<Tensor>>, (hs, ws): (usize, usize)| {
        blocks.iter().map(|b| b.macs(hs, ws)).sum::<u64>() + mixer.as_ref().map_or(0, |m| m.macs(hs, ws))
    };

    let mut total = p.stem.macs(h, w);
    for (s, enc) in p.encoder.iter().enumerate() {
        let (hs, ws) = size(s);
        if let Some(inj) = &enc.inject {
            total += inj.stem.macs(hs, ws) + inj.fuse.macs(hs, ws);
        }
        total += scale_macs(&enc.blocks, &enc.ldim, (hs, ws));
        if let Some(down) = &enc.down {
            total += down.macs(hs, ws);
        }
    }
    for (i, dec) in p.decoder.iter().enumerate() {
        let (hs, ws) = size(SCALES - 1 - i);
        if let Some(up) = &dec.up {
            total += up.macs(hs / 2, ws / 2);
        }
        if let Some(fuse) = &dec.fuse {
            total += fuse.macs(hs, ws);
        }
        total += scale_macs(&dec.blocks, &dec.ldim, (hs, ws)) + dec.head.macs(hs, ws);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(block: BlockKind, use_ldim: bool) -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            blocks_per_scale: 1,
            block,
            use_ldim,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shapes_follow_the_pyramid() {
        let model = build_model(&tiny(BlockKind::Plain, false), 0).unwrap();
        let x = Tensor::rand_uniform([1, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = forward_multiscale(&model, &x).unwrap();
        assert_eq!(out.full.shape(), [1, 3, 64, 64]);
        assert_eq!(out.half.shape(), [1, 3, 32, 32]);
        assert_eq!(out.quarter.shape(), [1, 3, 16, 16]);
    }

    #[test]
    fn fresh_model_returns_pooled_inputs() {
        let model = build_model(&tiny(BlockKind::Ersm, true), 2).unwrap();
        let x = Tensor::rand_uniform([2, 3, 16, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let out = model.forward(&x).unwrap();
        assert_eq!(out, ScaleOutputs::pyramid(&x).unwrap());
    }

    #[test]
    fn all_zero_parameters_return_the_input() {
        let mut model = build_model(&tiny(BlockKind::Drsm, true), 4).unwrap();
        model.params.visit_mut(&mut |t| t.data_mut().fill(0.0));
        let x = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(model.forward(&x).unwrap().full, x);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut model = build_model(&tiny(BlockKind::Rsam, true), 6).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        model.params.visit_mut(&mut |t| {
            let noise = Tensor::randn(t.shape(), 0.05, &mut r);
            t.add_assign(&noise).unwrap();
        });
        let x = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut r);
        assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let model = build_model(&tiny(BlockKind::Plain, false), 0).unwrap();
        let err = model.forward(&Tensor::zeros([1, 3, 10, 8])).unwrap_err();
        assert!(matches!(err, crate::Error::Input(_)));
        assert!(model.forward(&Tensor::zeros([1, 2, 8, 8])).is_err());
    }

    #[test]
    fn bottleneck_is_four_c_at_quarter_resolution() {
        let model = build_model(&tiny(BlockKind::Ersm, false), 0).unwrap();
        let bottleneck = &model.params.decoder[0];
        assert!(bottleneck.up.is_none());
        let Block::Ersm(b) = &bottleneck.blocks[0] else { panic!() };
        assert_eq!(b.channels(), 16);
        assert_eq!(model.params.encoder[2].down, None);
    }

    #[test]
    fn ersm_and_drsm_have_equal_parameter_counts() {
        let ersm = build_model(&tiny(BlockKind::Ersm, true), 0).unwrap();
        let drsm = build_model(&tiny(BlockKind::Drsm, true), 0).unwrap();
        assert_eq!(count_parameters(&ersm), count_parameters(&drsm));
        let plain = build_model(&tiny(BlockKind::Plain, false), 0).unwrap();
        let plain_ldim = build_model(&tiny(BlockKind::Plain, true), 0).unwrap();
        assert!(count_parameters(&plain_ldim) > count_parameters(&plain));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(BlockKind::Ersm, true);
        cfg.dw_kernel = 6;
        assert!(build_model(&cfg, 0).is_err());
        let mut cfg = tiny(BlockKind::Ersm, true);
        cfg.blocks_per_scale = 0;
        assert!(build_model(&cfg, 0).is_err());
        let mut cfg = tiny(BlockKind::Ersm, true);
        cfg.ldim_strips = vec![7, 8];
        assert!(build_model(&cfg, 0).is_err());
    }

    #[test]
    fn analytic_macs_match_recorded_macs() {
        for (block, use_ldim) in [
            (BlockKind::Ersm, true),
            (BlockKind::Drsm, false),
            (BlockKind::Plain, true),
            (BlockKind::Rsam, false),
        ] {
            let model = build_model(&tiny(block, use_ldim), 0).unwrap();
            let tape = Tape::new();
            let vars = trace(&tape, &model.params);
            forward_traced(&tape, &vars, &Tensor::zeros([2, 3, 16, 24])).unwrap();
            assert_eq!(count_macs(&model, 16, 24).unwrap(), tape.recorded_macs(), "{block:?}");
        }
    }

    #[test]
    fn task_profiles() {
        assert_eq!(ModelConfig::for_task(Task::Dehaze, Profile::Paper).blocks_per_scale, 3);
        assert_eq!(ModelConfig::for_task(Task::Deblur, Profile::Paper).blocks_per_scale, 15);
        assert_eq!(ModelConfig::for_task(Task::Desnow, Profile::Desk).blocks_per_scale, 5);
        assert_eq!(ModelConfig::for_task(Task::Desnow, Profile::Desk).base_channels, 8);
    }
}
