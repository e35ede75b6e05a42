//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each named op is traced on random parameters and a random input. The
//! objective is `Σ out · probe` for a fixed random probe, so every output
//! element contributes with a distinct weight. For each checked coordinate
//!
//! ```text
//! numeric = (f(θ + h) − f(θ − h)) / 2h
//! rel     = |analytic − numeric| / max(|analytic|, |numeric|, floor)
//! ```

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{forward_traced, BlockKind, ModelConfig, ModelParams, ScaleOutputs};
use crate::blocks::{csu, drsm, ersm, layer_norm, plain_block, BlockParams, PlainBlockParams};
use crate::error::{ensure, Error, Result};
use crate::kernels::{ConvSpec, StripAxis};
use crate::loss::{dual_domain_loss_traced, LAMBDA};
use crate::params::{flatten, Conv, Init, LayerNormParams, Params};
use crate::rsam::{rsam, RsamParams};
use crate::strip_attention::{dilation_for, ldim, ldsi, strip_weights, LdimConfig, LdimParams, LdsiParams, DEFAULT_STRIPS};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Lower bound of the relative-error denominator.
pub const FLOOR: f64 = 1e-5;
/// Coordinates checked per op; larger ops are subsampled.
pub const MAX_COORDS: usize = 4000;
pub const DEFAULT_SHAPE: [usize; 4] = [1, 4, 8, 8];

pub const OPS: &[&str] = &[
    "conv1x1",
    "layer_norm_channels",
    "csu",
    "ersm",
    "drsm",
    "plain_block",
    "generate_strip_weights",
    "strip_apply/h/d1",
    "strip_apply/h/d4",
    "strip_apply/v/d1",
    "strip_apply/v/d4",
    "ldsi/h",
    "ldsi/v",
    "ldim",
    "rsam",
    "dual_domain_loss",
    "model",
];

/// Ops whose name equals `pattern` or starts with `pattern/`.
pub fn matching_ops(pattern: &str) -> Vec<&'static str> {
    OPS.iter()
        .copied()
        .filter(|op| *op == pattern || op.strip_prefix(pattern).is_some_and(|rest| rest.starts_with('/')))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub shape: [usize; 4],
    pub seed: u64,
    pub tol: f64,
    pub checked: usize,
    pub total: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

type Build<'a> = Box<dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    leaves: Vec<(String, Tensor)>,
    build: Build<'a>,
}

/// Replaces every leaf with `N(0, 1/fan)` values, `fan` being the product
/// of all but the leading dimension.
fn randomize<T: Params<Tensor>>(params: &mut T, rng: &mut ChaCha8Rng) {
    params.visit_mut(&mut |t| {
        let shape = t.shape();
        let fan: usize = shape[1..].iter().product();
        *t = Tensor::randn(shape, 1.0 / (fan as f64).sqrt(), rng);
    });
}

fn rebuild<T: Params<Tensor>>(template: &T, vars: &[Var]) -> T::With<Var> {
    let mut i = 0;
    template.map_ref(&mut |_| {
        i += 1;
        vars[i - 1]
    })
}

fn param_leaves<T: Params<Tensor>>(prefix: &str, params: &T) -> Vec<(String, Tensor)> {
    flatten(params)
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("{prefix}[{i}]"), t.clone()))
        .collect()
}

/// Case for `f(x, params)` with the input as the last leaf.
fn with_input<'a, T, F>(params: T, x: Tensor, f: F) -> Case<'a>
where
    T: Params<Tensor> + 'a,
    F: Fn(&Tape, Var, &T::With<Var>) -> Result<Var> + 'a,
{
    let mut leaves = param_leaves("param", &params);
    let n = leaves.len();
    leaves.push(("x".to_string(), x));
    Case {
        leaves,
        build: Box::new(move |tape, vars| f(tape, vars[n], &rebuild(&params, &vars[..n]))),
    }
}

fn block_params(c: usize, rng: &mut ChaCha8Rng) -> BlockParams<Tensor> {
    let mut p = BlockParams::init(c, 2, 7, rng);
    randomize(&mut p, rng);
    p
}

fn make_case(op: &str, shape: [usize; 4], rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let [n, c, h, w] = shape;
    let x = Tensor::randn(shape, 1.0, rng);
    let case = match op {
        "conv1x1" => {
            let conv = Conv::new(c, c, 1, ConvSpec::same(1), true, Init::FanIn, rng);
            with_input(conv, x, |tape, x, p| p.apply(tape, x))
        }
        "layer_norm_channels" => {
            let mut p = LayerNormParams::identity(c);
            randomize(&mut p, rng);
            with_input(p, x, |tape, x, p| layer_norm(tape, x, p))
        }
        "csu" => with_input(block_params(c, rng), x, |tape, x, p| csu(tape, x, p)),
        "ersm" => with_input(block_params(c, rng), x, |tape, x, p| ersm(tape, x, p)),
        "drsm" => with_input(block_params(c, rng), x, |tape, x, p| drsm(tape, x, p)),
        "plain_block" => {
            let mut p = PlainBlockParams::init(c, rng);
            randomize(&mut p, rng);
            with_input(p, x, |tape, x, p| plain_block(tape, x, p))
        }
        "generate_strip_weights" => {
            let mut g = Conv::new(c, 7, 1, ConvSpec::same(1), true, Init::FanIn, rng);
            randomize(&mut g, rng);
            with_input(g, x, |tape, x, p| strip_weights(tape, x, p))
        }
        op if op.starts_with("strip_apply/") => {
            let axis = if op.contains("/h/") {
                StripAxis::Horizontal
            } else {
                StripAxis::Vertical
            };
            let dilation = if op.ends_with("d4") { 4 } else { 1 };
            let weights = Tensor::randn([n, 3, h, w], 1.0, rng);
            Case {
                leaves: vec![("x".to_string(), x), ("weights".to_string(), weights)],
                build: Box::new(move |tape, v| tape.strip_apply(v[0], v[1], axis, dilation)),
            }
        }
        "ldsi/h" | "ldsi/v" => {
            let axis = if op == "ldsi/h" {
                StripAxis::Horizontal
            } else {
                StripAxis::Vertical
            };
            let mut p = LdsiParams::init(c, 7, rng);
            randomize(&mut p, rng);
            debug_assert_eq!(dilation_for(7), 4);
            with_input(p, x, move |tape, x, p| ldsi(tape, x, p, axis))
        }
        "ldim" => {
            let mut p = LdimParams::init(LdimConfig::split(c, &DEFAULT_STRIPS)?, rng);
            randomize(&mut p, rng);
            with_input(p, x, |tape, x, p| ldim(tape, x, p))
        }
        "rsam" => {
            let mut p = RsamParams::init(c, 2, 7, &DEFAULT_STRIPS, rng)?;
            randomize(&mut p, rng);
            with_input(p, x, |tape, x, p| rsam(tape, x, p))
        }
        "dual_domain_loss" => {
            let targets = ScaleOutputs::pyramid(&Tensor::randn(shape, 1.0, rng))?;
            let pred = ScaleOutputs::pyramid(&Tensor::randn(shape, 1.0, rng))?;
            let leaves = ["full", "half", "quarter"]
                .into_iter()
                .zip(pred.as_array())
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect();
            Case {
                leaves,
                build: Box::new(move |tape, v| Ok(dual_domain_loss_traced(tape, [v[0], v[1], v[2]], &targets, LAMBDA)?.0)),
            }
        }
        "model" => {
            let cfg = ModelConfig {
                base_channels: 4,
                blocks_per_scale: 1,
                block: BlockKind::Ersm,
                image_channels: c,
                ..ModelConfig::default()
            };
            ensure!(h % 4 == 0 && w % 4 == 0, Input, "model gradcheck needs H, W divisible by 4");
            let mut p = ModelParams::init(&cfg, rng)?;
            randomize(&mut p, rng);
            let targets = ScaleOutputs::pyramid(&Tensor::rand_uniform(shape, 0.0, 1.0, rng))?;
            let images = Tensor::rand_uniform(shape, 0.0, 1.0, rng);
            Case {
                leaves: param_leaves("param", &p),
                build: Box::new(move |tape, v| {
                    let outs = forward_traced(tape, &rebuild(&p, v), &images)?;
                    Ok(dual_domain_loss_traced(tape, outs, &targets, LAMBDA)?.0)
                }),
            }
        }
        other => return Err(Error::Config(format!("unknown gradcheck op `{other}`"))),
    };
    Ok(case)
}

fn evaluate(case: &Case, leaves: &[Tensor]) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&tape, &vars)?;
    Ok(tape.value(out).as_ref().clone())
}

/// Runs the check for one op from [`OPS`] on input `shape`.
pub fn grad_check(op: &str, shape: [usize; 4], seed: u64, tol: f64) -> Result<GradCheckReport> {
    ensure!(shape.iter().all(|&d| d > 0), Input, "empty gradcheck shape {shape:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = make_case(op, shape, &mut rng)?;
    let mut leaves: Vec<Tensor> = case.leaves.iter().map(|(_, t)| t.clone()).collect();

    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&tape, &vars)?;
    let probe = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    let root = tape.dot(out, &probe)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let sizes: Vec<usize> = leaves.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = if total <= MAX_COORDS {
        (0..total).collect()
    } else {
        let mut picked = index::sample(&mut rng, total, MAX_COORDS).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst = None;
    for &flat in &coords {
        let (mut leaf, mut idx) = (0, flat);
        while idx >= sizes[leaf] {
            idx -= sizes[leaf];
            leaf += 1;
        }
        let orig = leaves[leaf].data()[idx];
        let (up, down) = (orig + STEP, orig - STEP);
        leaves[leaf].data_mut()[idx] = up;
        let plus = evaluate(&case, &leaves)?;
        leaves[leaf].data_mut()[idx] = down;
        let minus = evaluate(&case, &leaves)?;
        leaves[leaf].data_mut()[idx] = orig;

        // differencing before the probe sum keeps cancellation per element
        let diff: f64 = plus
            .data()
            .iter()
            .zip(minus.data())
            .zip(probe.data())
            .map(|((p, m), w)| (p - m) * w)
            .sum();
        let numeric = diff / (up - down);
        let a = analytic[leaf].data()[idx];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
        max_abs = max_abs.max(abs);
        if rel > max_rel || !rel.is_finite() {
            max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            worst = Some(WorstCoordinate {
                leaf: case.leaves[leaf].0.clone(),
                index: idx,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        shape,
        seed,
        tol,
        checked: coords.len(),
        total,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst,
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_selects_op_families() {
        assert_eq!(matching_ops("strip_apply").len(), 4);
        assert_eq!(matching_ops("ldsi"), vec!["ldsi/h", "ldsi/v"]);
        assert_eq!(matching_ops("rsam"), vec!["rsam"]);
        assert!(matching_ops("strip").is_empty());
    }

    #[test]
    fn linear_op_is_exact_to_roundoff() {
        let r = grad_check("conv1x1", DEFAULT_SHAPE, 0, 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, r.total);
    }

    #[test]
    fn strip_apply_and_ersm_pass() {
        for op in ["strip_apply/h/d4", "ersm"] {
            let r = grad_check(op, DEFAULT_SHAPE, 1, DEFAULT_TOL).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn unknown_op_is_a_config_error() {
        assert!(matches!(grad_check("nope", DEFAULT_SHAPE, 0, 1e-4), Err(Error::Config(_))));
    }
}
