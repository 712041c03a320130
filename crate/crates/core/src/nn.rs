//! Parameter storage, convolution layers and the SGD optimizer.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor in `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.param(t.clone())).collect() }
    }

    /// Registers every tensor as a constant (inference, no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.input(t.clone())).collect() }
    }

    /// Replaces tensor values from `other` by name. Shapes must agree and
    /// every parameter must be present.
    pub fn load_from(&mut self, names: &[String], tensors: &[Tensor]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name}")))?;
            if tensors[j].shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: tensors[j].shape().to_vec(),
                });
            }
            self.tensors[i] = tensors[j].clone();
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a [`ParamStore`], indexable by
/// [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles supplied by the caller, one per store parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter after `g.backward`; unreachable
    /// parameters get zeros.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }
}

/// Multiplier on `1/sqrt(fan_in)` for the init bound.
pub const INIT_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

/// `k×k` convolution (k odd) with same padding, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    /// Kernel drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)` (He uniform, which
    /// keeps activation scale through ReLU stacks), zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        Self::with_gain(store, name, (k, c_in, c_out, stride), bias, INIT_GAIN, rng)
    }

    /// Linear output layer: `b = 1/sqrt(fan_in)`.
    pub fn linear(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        Self::with_gain(store, name, (k, c_in, c_out, 1), bias, 1.0, rng)
    }

    /// `dims` is `(k, c_in, c_out, stride)`; the bound is `gain / sqrt(k·k·c_in)`.
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        (k, c_in, c_out, stride): (usize, usize, usize, usize),
        bias: bool,
        gain: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let bound = gain / ((k * k * c_in) as f64).sqrt();
        let kernel = store.add(format!("{name}.weight"), Tensor::uniform([k, k, c_in, c_out], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
        Self { kernel, bias, k, stride, c_in, c_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.kernel), self.stride)?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// SGD with momentum and L2 weight decay, using the
/// classic `v = μ·v + (g + wd·w); w -= lr·v` update.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        if self.velocity.is_empty() {
            self.velocity = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        }
        for ((w, g), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
        }
    }
}
