//! Parameters, layers and the optimizer shared by every model in the crate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::autograd::{ConvSpec, Grads, Graph, Var};
use crate::tensor::Tensor;

static NEXT_PARAM: AtomicUsize = AtomicUsize::new(0);

/// Process-unique identity of a [`Param`]. Cloning a parameter mints a new id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    value: Tensor,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param { id: ParamId::fresh(), value: self.value.clone() }
    }
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { id: ParamId::fresh(), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// A tree of named parameters.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value().numel());
        n
    }

    /// Order-sensitive FNV-1a digest of every parameter bit pattern.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit("", &mut |name, p| {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            for v in p.value().data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x1000_0000_01b3);
            }
        });
        h
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((String::from(name), p.shape().to_vec())));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Param {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        f(prefix, self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self);
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &format!("{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &format!("{i}")), f);
        }
    }
}

impl<M: Module> Module for BTreeMap<usize, M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        for (k, m) in self {
            m.visit(&join(prefix, &format!("{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, m) in self.iter_mut() {
            m.visit_mut(&join(prefix, &format!("{k}")), f);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a $crate::nn::Param)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::Param)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// A frozen network whose activations serve as a perceptual feature space.
pub trait FeatureNet {
    /// Features of `x: [N, 3, H, W]` as `[N, D]`.
    fn features(&self, g: &mut Graph, x: Var) -> Var;
    /// Marks every parameter of the network constant in `g`.
    fn freeze(&self, g: &mut Graph);
}

/// Copies parameter values from `src` into `dst`, matching by name and shape.
pub fn load_values<M: Module + ?Sized>(dst: &mut M, src: &BTreeMap<String, Tensor>) -> Result<(), crate::Error> {
    let mut missing = None;
    dst.visit_mut("", &mut |name, p| {
        if missing.is_some() {
            return;
        }
        match src.get(name) {
            Some(t) if t.shape() == p.shape() => *p.value_mut() = t.clone(),
            Some(t) => {
                missing = Some(crate::Error::Shape(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )))
            }
            None => missing = Some(crate::Error::Shape(format!("parameter {name} missing from stored values"))),
        }
    });
    missing.map_or(Ok(()), Err)
}

pub fn named_values<M: Module + ?Sized>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((String::from(name), p.value().clone())));
    out
}

/// He-normal initialisation for a layer with `fan_in` inputs.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, libm::sqrt(2.0 / fan_in as f64), rng)
}

/// Fully connected layer `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(he_normal(&[outputs, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(&[outputs])),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear { weight: Param::new(Tensor::zeros(&[outputs, inputs])), bias: Param::new(Tensor::zeros(&[outputs])) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the layer to `x: [rows, in]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul_t(x, false, w, true);
        g.add(y, b)
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl_module!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * k * k;
        Conv2d {
            weight: Param::new(he_normal(&[cout, cin, k, k], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv2d(x, w, ConvSpec { stride: self.stride, pad: self.pad });
        let cout = self.weight.shape()[0];
        let b = g.reshape(b, &[1, cout, 1, 1]);
        g.add(y, b)
    }
}

/// Adam with optional decoupled weight decay and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, moments: BTreeMap::new() }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `model` that received a gradient.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, grads: &Grads) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grads.param_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - libm::pow(b1, self.step as f64);
        let bc2 = 1.0 - libm::pow(b2, self.step as f64);
        let lr = self.lr;
        let moments = &mut self.moments;
        model.visit_mut("", &mut |_, p| {
            let Some(g) = grads.param(p.id()) else { return };
            let n = g.numel();
            let (m, v) = moments
                .entry(p.id())
                .or_insert_with(|| (alloc::vec![0.0; n], alloc::vec![0.0; n]));
            for (((w, &gi), mi), vi) in p.value_mut().data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        });
    }
}
