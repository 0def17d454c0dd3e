//! Named parameter storage shared by every trainable block.
//!
//! Blocks register their tensors in a [`ParamStore`] and keep the returned
//! [`ParamId`]s. A forward pass binds the whole store onto a tape once and
//! looks parameters up through the resulting [`Bound`] table. The store's
//! insertion order is the canonical parameter order used by the optimizer
//! and the checkpoint format.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use std::ops::Index;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Convolution weight `[cout, cin/groups, k, k, k]` with a uniform
    /// fan-in initialization.
    pub fn conv_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        cout: usize,
        cin_per_group: usize,
        k: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / ((cin_per_group * k * k * k) as f64).sqrt();
        self.add(name, Tensor::uniform([cout, cin_per_group, k, k, k], -bound, bound, rng))
    }

    /// Dense weight `[din, dout]` with a uniform fan-in initialization.
    pub fn dense_weight<R: Rng + ?Sized>(&mut self, name: impl Into<String>, din: usize, dout: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (din as f64).sqrt();
        self.add(name, Tensor::uniform([din, dout], -bound, bound, rng))
    }

    pub fn bias<R: Rng + ?Sized>(&mut self, name: impl Into<String>, n: usize, fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::uniform([n], -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound { vars: self.values.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect() }
    }

    /// Gradients in canonical order; errors if any bound parameter has none.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Result<Vec<Tensor>> {
        bound
            .vars
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.take(v).ok_or_else(|| Error::MissingGradient(self.names[i].clone())))
            .collect()
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Uses existing tape variables as the store's parameters, in canonical order.
    pub fn from_vars(store: &ParamStore, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Affine parameters of an instance normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([channels])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.instance_norm(x, p[self.gamma], p[self.beta])
    }
}

/// A biased 3-D convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: crate::autodiff::ConvOpts,
}

impl ConvParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: crate::autodiff::ConvOpts,
        rng: &mut R,
    ) -> Self {
        let cin_g = cin / opts.groups;
        let weight = store.conv_weight(format!("{prefix}.weight"), cout, cin_g, kernel, rng);
        let bias = store.bias(format!("{prefix}.bias"), cout, cin_g * kernel.pow(3), rng);
        Self { weight, bias, opts }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(x, p[self.weight], Some(p[self.bias]), self.opts)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}
