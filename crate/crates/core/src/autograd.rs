//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Every op evaluates eagerly, appends a node holding its output and its
//! parents, and [`Tape::backward`] walks the nodes in reverse. Nodes are
//! appended in evaluation order, so reverse index order is a valid
//! topological order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::kernels::conv::{self, ConvSpec};
use crate::kernels::pointwise::{self, LayerNormCache};
use crate::kernels::spectral;
use crate::kernels::strip::{self, StripAxis};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Gelu {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
    },
    Strip {
        x: Var,
        weights: Var,
        axis: StripAxis,
        dilation: usize,
    },
    /// Scalar-valued ops store their gradient w.r.t. `x` up front.
    ScalarReduce {
        x: Var,
        local_grad: Tensor,
    },
    Combine {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 4]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros when no path reaches it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let out = conv::conv2d(&self.value(x), &self.value(w), bias.as_deref(), spec)?;
        Ok(self.push(out, Op::Conv { x, w, b, spec }))
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let out = conv::conv_transpose2d(&self.value(x), &self.value(w), bias.as_deref(), stride, padding)?;
        Ok(self.push(
            out,
            Op::ConvTranspose {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn layer_norm_channels(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            pointwise::layer_norm_channels(&self.value(x), &self.value(gain), &self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let out = self.value(x).map(pointwise::gelu);
        self.push(out, Op::Gelu { x })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |p, q| p * q)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        Ok(self.push(out, Op::Slice { x, start }))
    }

    pub fn softmax_channels(&self, x: Var) -> Var {
        let out = pointwise::softmax_channels(&self.value(x));
        self.push(out, Op::Softmax { x })
    }

    pub fn strip_apply(&self, x: Var, weights: Var, axis: StripAxis, dilation: usize) -> Result<Var> {
        let out = strip::strip_apply(&self.value(x), &self.value(weights), axis, dilation)?;
        Ok(self.push(
            out,
            Op::Strip {
                x,
                weights,
                axis,
                dilation,
            },
        ))
    }

    /// `Σ x` as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let value = self.value(x);
        let total = value.sum();
        let local_grad = Tensor::full(value.shape(), 1.0);
        self.push(Tensor::scalar(total), Op::ScalarReduce { x, local_grad })
    }

    /// `Σ x · probe` as a scalar; `probe` is a constant.
    pub fn dot(&self, x: Var, probe: &Tensor) -> Result<Var> {
        let value = self.value(x);
        value.expect_same_shape(probe, "dot")?;
        let total: f64 = value.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::ScalarReduce {
                x,
                local_grad: probe.clone(),
            },
        ))
    }

    /// `(1/S) Σ |x - target|`, with `S` the element count.
    pub fn l1_mean(&self, x: Var, target: &Tensor) -> Result<Var> {
        let value = self.value(x);
        value.expect_same_shape(target, "l1")?;
        let s = value.numel() as f64;
        let total: f64 = value.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let local_grad = value.zip_map(target, |a, b| sign(a - b) / s)?;
        Ok(self.push(Tensor::scalar(total / s), Op::ScalarReduce { x, local_grad }))
    }

    /// Spectral counterpart of [`Tape::l1_mean`]; see [`spectral::spectral_l1`].
    pub fn spectral_l1_mean(&self, x: Var, target: &Tensor) -> Result<Var> {
        let (total, local_grad) = spectral::spectral_l1(&self.value(x), target)?;
        Ok(self.push(Tensor::scalar(total), Op::ScalarReduce { x, local_grad }))
    }

    /// `Σ weight_i · term_i` over equally shaped values.
    pub fn combine(&self, terms: &[(Var, f64)]) -> Result<Var> {
        ensure!(!terms.is_empty(), Dimension, "combine of zero terms");
        let mut out = Tensor::zeros(self.shape(terms[0].0));
        for &(v, weight) in terms {
            out.add_assign(&self.value(v).scale(weight))?;
        }
        Ok(self.push(out, Op::Combine { terms: terms.to_vec() }))
    }

    /// Multiply-accumulates per batch sample over every recorded convolution
    /// and strip gather, read off the operand shapes.
    pub fn recorded_macs(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let shape = |v: &Var| nodes[v.0].value.shape();
        let mut total = 0u64;
        for node in nodes.iter() {
            let [_, c, h, w] = node.value.shape();
            let per_sample = (c * h * w) as u64;
            total += match &node.op {
                Op::Conv { w: weight, .. } => {
                    let [_, cin_g, kh, kw] = shape(weight);
                    per_sample * (cin_g * kh * kw) as u64
                }
                Op::ConvTranspose { x, w: weight, .. } => {
                    let [_, _, hi, wi] = shape(x);
                    (hi * wi) as u64 * shape(weight).iter().product::<usize>() as u64
                }
                Op::Strip { weights, .. } => per_sample * shape(weights)[1] as u64,
                _ => 0,
            };
        }
        total
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        ensure!(
            shape == [1, 1, 1, 1],
            Dimension,
            "backward needs a scalar root, got {shape:?}"
        );
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Backpropagates an arbitrary cotangent `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        nodes[root.0].value.expect_same_shape(&seed, "backward seed")?;
        let shapes: Vec<[usize; 4]> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| nodes[v.0].value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, b, spec } => {
                    let (dx, dw) = conv::conv2d_backward(val(*x), val(*w), &g, *spec)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, conv::bias_grad(&g))?;
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                }
                Op::ConvTranspose {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (dx, dw) = conv::conv_transpose2d_backward(val(*x), val(*w), &g, *stride, *padding)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, conv::bias_grad(&g))?;
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let (dx, dg, db) = pointwise::layer_norm_channels_backward(&g, val(*gain), cache);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dg)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Gelu { x } => {
                    let dx = val(*x).zip_map(&g, |v, d| pointwise::gelu_grad(v) * d)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Mul { a, b } => {
                    let da = val(*b).zip_map(&g, |v, d| v * d)?;
                    let db = val(*a).zip_map(&g, |v, d| v * d)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let c = shapes[p.0][1];
                        accumulate(&mut grads, *p, g.slice_channels(at, c)?)?;
                        at += c;
                    }
                }
                Op::Slice { x, start } => {
                    let full = shapes[x.0];
                    let [n, _, h, w] = full;
                    let len = g.channels();
                    let mut dx = Tensor::zeros(full);
                    let plane = h * w;
                    for b in 0..n {
                        dx.sample_mut(b)[start * plane..(start + len) * plane].copy_from_slice(g.sample(b));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Softmax { x } => {
                    let dx = pointwise::softmax_channels_backward(&node.value, &g);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Strip {
                    x,
                    weights,
                    axis,
                    dilation,
                } => {
                    let (dx, da) = strip::strip_apply_backward(val(*x), val(*weights), &g, *axis, *dilation)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *weights, da)?;
                }
                Op::ScalarReduce { x, local_grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, local_grad.scale(s))?;
                }
                Op::Combine { terms } => {
                    for &(v, weight) in terms {
                        accumulate(&mut grads, v, g.scale(weight))?;
                    }
                }
            }
        }
        grads.resize(shapes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_on_shared_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let total = tape.sum(sq);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0, -4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 2, 1, 1], 1.0));
        let unused = tape.leaf(Tensor::full([1, 3, 1, 1], 1.0));
        let total = tape.sum(x);
        let grads = tape.backward(total).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Tensor::zeros([1, 3, 1, 1]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 1, 1]));
        assert!(tape.backward(x).is_err());
    }
}
