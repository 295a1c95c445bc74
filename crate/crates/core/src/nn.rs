//! Parameter containers, the dense layer and dropout.
//!
//! Every trainable structure implements [`Params`]. Gradients are stored in a
//! value of the same type (see [`Params::zeros_like`]), so optimizers, gradient
//! checks and serialization can walk parameters and gradients in lockstep.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{init_uniform, kernels, Tensor};

pub trait Params {
    /// Calls `f` on every tensor with a dotted hierarchical name.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));

    /// Same traversal order as [`Params::visit`].
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |t| t.fill(0.0));
        z
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(self);
    }
}

impl<P: Params> Params for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(f);
        }
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        for p in self.iter_mut() {
            p.visit_mut(f);
        }
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields in order.
macro_rules! impl_params {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor),
            ) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )+
            }

            fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut $crate::tensor::Tensor)) {
                $( self.$field.visit_mut(f); )+
            }
        }
    };
}
pub(crate) use impl_params;

/// `dst += scale * src` over every tensor pair.
pub fn accumulate<P: Params>(dst: &mut P, src: &P, scale: f64) {
    let sources = src.named_tensors("");
    for (d, (_, s)) in dst.tensors_mut().into_iter().zip(sources) {
        kernels::axpy(scale, s.data(), d.data_mut());
    }
}

/// Fully connected layer `y = W x + b` with `W: [out×in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl_params!(Dense { weight, bias });

impl Dense {
    /// Uniform initialization with scale `1/sqrt(fan_in)`, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (input.max(1) as f64).sqrt();
        Dense {
            weight: init_uniform(rng, &[output, input], scale).expect("positive scale"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(n: usize) -> Self {
        Dense {
            weight: Tensor::identity(n),
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return Err(Error::shape("dense", self.weight.shape(), &[x.len()]));
        }
        let mut y = self.bias.data().to_vec();
        for (yi, row) in y.iter_mut().zip(self.weight.data().chunks_exact(x.len().max(1))) {
            *yi += kernels::dot(row, x);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.input_size()];
        kernels::matvec_t_acc(self.weight.data(), self.input_size(), dy, &mut dx);
        kernels::outer_acc(grads.weight.data_mut(), dy, x);
        kernels::axpy(1.0, dy, grads.bias.data_mut());
        dx
    }
}

pub fn relu_in_place(xs: &mut [f64]) {
    xs.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes gradient entries whose forward activation was clipped.
pub fn relu_backward_in_place(activated: &[f64], dy: &mut [f64]) {
    for (g, a) in dy.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Inverted-dropout mask: entries are 0 or `1/(1-rate)`.
pub fn dropout_mask(rng: &mut Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Applies dropout when training with a nonzero rate; returns the mask used.
pub fn apply_dropout(xs: &mut [f64], rate: f64, rng: Option<&mut Rng>) -> Option<Vec<f64>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask(rng, xs.len(), rate);
            xs.iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
            Some(mask)
        }
        _ => None,
    }
}

pub fn apply_mask(dy: &mut [f64], mask: Option<&Vec<f64>>) {
    if let Some(mask) = mask {
        dy.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
    }
}
