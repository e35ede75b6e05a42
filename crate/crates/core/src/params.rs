//! Parameter containers shared by every module.
//!
//! Parameter structs are generic over the leaf type `P`: `Tensor` for stored
//! weights, gradients and optimizer moments, [`Var`] while tracing a forward
//! pass. [`Params`] gives every container a structure-preserving `map` and a
//! fixed visiting order, which is also the serialization order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kernels::conv::{conv_output_size, ConvSpec};
use crate::tensor::Tensor;

pub trait Params<P> {
    type With<U>;

    fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> Self::With<U>;
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P));
}

impl<P, T: Params<P>> Params<P> for Vec<T> {
    type With<U> = Vec<T::With<U>>;

    fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> Self::With<U> {
        self.iter().map(|t| t.map_ref(f)).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.iter().for_each(|t| t.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.iter_mut().for_each(|t| t.visit_mut(f));
    }
}

impl<P, T: Params<P>> Params<P> for Option<T> {
    type With<U> = Option<T::With<U>>;

    fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> Self::With<U> {
        self.as_ref().map(|t| t.map_ref(f))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        if let Some(t) = self {
            t.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        if let Some(t) = self {
            t.visit_mut(f);
        }
    }
}

/// Implements [`Params`] for a struct whose fields are all parameter containers.
macro_rules! impl_params {
    ($name:ident { $($field:ident),+ $(,)? }) => {
        impl<P> $crate::params::Params<P> for $name<P> {
            type With<U> = $name<U>;

            fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> $name<U> {
                $name { $($field: self.$field.map_ref(f)),+ }
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
                $(self.$field.visit(f);)+
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
                $(self.$field.visit_mut(f);)+
            }
        }
    };
}
pub(crate) use impl_params;

/// Leaf tensors in visiting order.
pub fn flatten<T: Params<Tensor>>(params: &T) -> Vec<&Tensor> {
    let mut out = Vec::new();
    params.visit(&mut |t| out.push(t));
    out
}

/// Number of trainable scalars.
pub fn count_scalars<T: Params<Tensor>>(params: &T) -> usize {
    let mut total = 0;
    params.visit(&mut |t| total += t.numel());
    total
}

/// Records every leaf of `params` on `tape`.
pub fn trace<T: Params<Tensor>>(tape: &Tape, params: &T) -> T::With<Var> {
    params.map_ref(&mut |t| tape.leaf(t.clone()))
}

/// Zero tensors shaped like `params`.
pub fn zeros_like<T: Params<Tensor>>(params: &T) -> T::With<Tensor> {
    params.map_ref(&mut |t| Tensor::zeros(t.shape()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Standard(ConvSpec),
    /// Weight is `[Cin, Cout, k, k]`.
    Transposed { stride: usize, padding: usize },
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(±1/sqrt(fan_in))` for weight and bias.
    FanIn,
    /// `N(0, std²)` weights, zero bias.
    Normal(f64),
    Zeros,
}

/// A convolution: weight, optional bias, and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: Option<P>,
    pub kind: ConvKind,
}

impl<P> Params<P> for Conv<P> {
    type With<U> = Conv<U>;

    fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(|b| f(b)),
            kind: self.kind,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

impl Conv<Tensor> {
    /// A standard convolution `cin → cout` with a square `kernel`.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [cout, cin / spec.groups, kernel, kernel];
        let fan_in = (cin / spec.groups) * kernel * kernel;
        Self::initialized(shape, cout, fan_in, ConvKind::Standard(spec), bias, init, rng)
    }

    /// A transposed convolution `cin → cout`.
    pub fn transposed<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [cin, cout, kernel, kernel];
        let fan_in = cout * kernel * kernel;
        Self::initialized(shape, cout, fan_in, ConvKind::Transposed { stride, padding }, true, init, rng)
    }

    fn initialized<R: Rng + ?Sized>(
        shape: [usize; 4],
        cout: usize,
        fan_in: usize,
        kind: ConvKind,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let (weight, b) = match init {
            Init::FanIn => (
                Tensor::rand_uniform(shape, -bound, bound, rng),
                Tensor::rand_uniform([1, cout, 1, 1], -bound, bound, rng),
            ),
            Init::Normal(std) => (Tensor::randn(shape, std, rng), Tensor::zeros([1, cout, 1, 1])),
            Init::Zeros => (Tensor::zeros(shape), Tensor::zeros([1, cout, 1, 1])),
        };
        Conv {
            weight,
            bias: bias.then_some(b),
            kind,
        }
    }

    pub fn in_channels(&self) -> usize {
        let [a, b, _, _] = self.weight.shape();
        match self.kind {
            ConvKind::Standard(spec) => b * spec.groups,
            ConvKind::Transposed { .. } => a,
        }
    }

    pub fn out_channels(&self) -> usize {
        let [a, b, _, _] = self.weight.shape();
        match self.kind {
            ConvKind::Standard(_) => a,
            ConvKind::Transposed { .. } => b,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        match self.kind {
            ConvKind::Standard(spec) => conv_output_size(h, w, k, spec),
            ConvKind::Transposed { stride, padding } => (
                (h - 1) * stride + k - 2 * padding,
                (w - 1) * stride + k - 2 * padding,
            ),
        }
    }

    /// Multiply-accumulates for one sample of size `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let [a, b, kh, kw] = self.weight.shape();
        let per_position = (a * b * kh * kw) as u64;
        match self.kind {
            ConvKind::Standard(_) => {
                let (ho, wo) = self.output_size(h, w);
                per_position * (ho * wo) as u64
            }
            ConvKind::Transposed { .. } => per_position * (h * w) as u64,
        }
    }

    /// Zeroes weight and bias.
    pub fn zero(&mut self) {
        self.visit_mut(&mut |t| t.data_mut().fill(0.0));
    }
}

impl Conv<Var> {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        match self.kind {
            ConvKind::Standard(spec) => tape.conv2d(x, self.weight, self.bias, spec),
            ConvKind::Transposed { stride, padding } => {
                tape.conv_transpose2d(x, self.weight, self.bias, stride, padding)
            }
        }
    }
}

/// Per-channel affine of a channel layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> Params<P> for LayerNormParams<P> {
    type With<U> = LayerNormParams<U>;

    fn map_ref<U>(&self, f: &mut dyn FnMut(&P) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl LayerNormParams<Tensor> {
    /// Unit gain, zero bias.
    pub fn identity(channels: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full([1, channels, 1, 1], 1.0),
            bias: Tensor::zeros([1, channels, 1, 1]),
        }
    }
}

/// Evaluates a traced function of one input on a throwaway tape.
pub(crate) fn eval_traced<T, F>(params: &T, x: &Tensor, f: F) -> Result<Tensor>
where
    T: Params<Tensor>,
    F: FnOnce(&Tape, Var, &T::With<Var>) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = trace(&tape, params);
    let xv = tape.leaf(x.clone());
    let out = f(&tape, xv, &vars)?;
    Ok(tape.value(out).as_ref().clone())
}
