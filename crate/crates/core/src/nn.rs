//! Parameter storage and the small layer vocabulary used by the model stacks.
//!
//! Weights are stored unscaled (drawn from a unit normal) and multiplied by a
//! fan-in constant inside each forward pass, so every tensor trains at a
//! comparable effective rate regardless of its size.

use crate::autodiff::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in stable insertion order.
///
/// The insertion order is fixed by model construction, which makes the
/// serialized byte layout of a checkpoint reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Loads every tensor onto a tape, in store order.
    pub fn load(&self, tape: &mut Tape) -> LoadedParams {
        LoadedParams {
            vars: self.entries.iter().map(|(_, v)| tape.leaf(v.clone())).collect(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape variables for a whole store, indexable by [`ParamId`].
pub struct LoadedParams {
    vars: Vec<Var>,
}

impl LoadedParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Deterministic unit-normal init; one fresh stream per tensor.
pub fn normal_init(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(&mut rng))
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// 2-d convolution with bias and fan-in weight scaling.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    scale: f64,
}

impl ConvLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
        seed: u64,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            normal_init(&[c_out, c_in, kernel, kernel], seed),
        );
        let bias = store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
        let fan_in = (c_in * kernel * kernel) as f64;
        Self { weight, bias, scale: gain / fan_in.sqrt() }
    }

    pub fn forward(&self, tape: &mut Tape, params: &LoadedParams, x: Var) -> Var {
        let w = tape.scale(params.var(self.weight), self.scale);
        let y = tape.conv2d(x, w);
        tape.add_bias_chan(y, params.var(self.bias))
    }
}

/// Fully connected layer with bias and fan-in weight scaling.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    scale: f64,
}

impl LinearLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        gain: f64,
        seed: u64,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), normal_init(&[f_out, f_in], seed));
        let bias = store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[f_out])));
        Self { weight, bias, scale: gain / (f_in as f64).sqrt() }
    }

    pub fn forward(&self, tape: &mut Tape, params: &LoadedParams, x: Var) -> Var {
        let w = tape.scale(params.var(self.weight), self.scale);
        let y = tape.linear(x, w);
        tape.add_bias_row(y, params.var(self.bias))
    }
}

/// Texture-conditioned channel modulation: x * (1 + W t) per sample/channel.
#[derive(Clone, Debug)]
pub struct Modulation {
    proj: LinearLayer,
}

impl Modulation {
    pub fn init(store: &mut ParamStore, name: &str, t_dim: usize, channels: usize, seed: u64) -> Self {
        Self { proj: LinearLayer::init(store, name, t_dim, channels, 1.0, seed) }
    }

    pub fn forward(&self, tape: &mut Tape, params: &LoadedParams, x: Var, texture: Var) -> Var {
        let s = self.proj.forward(tape, params, texture);
        let batch = tape.value(x).shape()[0];
        let channels = tape.value(s).shape()[1];
        let ones = tape.leaf(ArrayD::from_elem(IxDyn(&[batch, channels]), 1.0));
        let s = tape.add(s, ones);
        tape.scale_channels(x, s)
    }
}
