//! Execution backends for the module tree.
//!
//! Every module's forward pass is written once against [`Ops`]. [`Exec`] runs
//! it on real tensors (optionally recording gradients); the cost model runs it
//! on shapes only.

use std::collections::HashMap;

use crate::autograd::{self, BatchStats, Var};
use crate::tensor::{Real, Shape, Tensor};

use super::modules::{ConvUnit, ParamId};

pub trait Ops {
    type Value: Clone;

    fn shape_of(&self, v: &Self::Value) -> Shape;
    /// Convolution followed by the unit's optional normalization and ReLU.
    fn conv_unit(&mut self, unit: &ConvUnit, x: &Self::Value) -> Self::Value;
    fn add(&mut self, id: &str, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn relu(&mut self, id: &str, x: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, id: &str, x: &Self::Value) -> Self::Value;
    fn one_minus(&mut self, id: &str, x: &Self::Value) -> Self::Value;
    /// Product with a same-shaped or single-channel gate.
    fn mul(&mut self, id: &str, x: &Self::Value, gate: &Self::Value) -> Self::Value;
    /// Bilinear resize; a no-op when the size already matches.
    fn resize(&mut self, id: &str, x: &Self::Value, h: usize, w: usize) -> Self::Value;
    fn concat(&mut self, id: &str, xs: &[Self::Value]) -> Self::Value;
    fn select(&mut self, id: &str, x: &Self::Value, channels: &[usize]) -> Self::Value;
}

/// Normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// Parameters and running statistics of one network, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T: Real> {
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
}

/// Whether normalization uses batch statistics (and reports them) or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tensor backend.
pub struct Exec<'a, T: Real> {
    weights: &'a Weights<T>,
    mode: Mode,
    track_grad: bool,
    leaves: HashMap<ParamId, Var<T>>,
    /// `(mean buffer, var buffer, stats)` for every normalization run in train mode.
    pub batch_stats: Vec<(usize, usize, BatchStats)>,
}

impl<'a, T: Real> Exec<'a, T> {
    pub fn new(weights: &'a Weights<T>, mode: Mode, track_grad: bool) -> Self {
        Exec {
            weights,
            mode,
            track_grad,
            leaves: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    fn param(&mut self, id: ParamId) -> Var<T> {
        if !self.track_grad {
            return Var::constant(self.weights.params[id.0].clone());
        }
        self.leaves
            .entry(id)
            .or_insert_with(|| Var::leaf(self.weights.params[id.0].clone()))
            .clone()
    }

    /// Gradient of every parameter touched by the forward pass (after `backward`).
    pub fn gradients(&self) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; self.weights.params.len()];
        for (id, v) in &self.leaves {
            out[id.0] = v.grad();
        }
        out
    }
}

impl<T: Real> Ops for Exec<'_, T> {
    type Value = Var<T>;

    fn shape_of(&self, v: &Var<T>) -> Shape {
        v.shape()
    }

    fn conv_unit(&mut self, unit: &ConvUnit, x: &Var<T>) -> Var<T> {
        let w = self.param(unit.weight);
        let b = unit.bias.map(|b| self.param(b));
        let mut y = autograd::conv2d(x, &w, b.as_ref(), unit.geometry);
        if let Some(norm) = &unit.norm {
            let gamma = self.param(norm.gamma);
            let beta = self.param(norm.beta);
            y = match self.mode {
                Mode::Train => {
                    let (out, stats) = autograd::batch_norm_train(&y, &gamma, &beta, NORM_EPS);
                    self.batch_stats.push((norm.mean, norm.var, stats));
                    out
                }
                Mode::Eval => {
                    let mean = self.weights.buffers[norm.mean].data();
                    let var = self.weights.buffers[norm.var].data();
                    let c = mean.len();
                    let g = gamma.value().data();
                    let b = beta.value().data();
                    let eps = T::from_f64(NORM_EPS);
                    let scale: Vec<T> = (0..c).map(|i| g[i] / (var[i] + eps).sqrt()).collect();
                    let shift: Vec<T> = (0..c).map(|i| b[i] - mean[i] * scale[i]).collect();
                    let s = Shape::new(1, c, 1, 1);
                    autograd::channel_affine(
                        &y,
                        &Var::constant(Tensor::from_vec(s, scale)),
                        &Var::constant(Tensor::from_vec(s, shift)),
                    )
                }
            };
        }
        if unit.relu {
            y = autograd::relu(&y);
        }
        y
    }

    fn add(&mut self, _: &str, a: &Var<T>, b: &Var<T>) -> Var<T> {
        autograd::add(a, b)
    }

    fn relu(&mut self, _: &str, x: &Var<T>) -> Var<T> {
        autograd::relu(x)
    }

    fn sigmoid(&mut self, _: &str, x: &Var<T>) -> Var<T> {
        autograd::sigmoid(x)
    }

    fn one_minus(&mut self, _: &str, x: &Var<T>) -> Var<T> {
        autograd::one_minus(x)
    }

    fn mul(&mut self, _: &str, x: &Var<T>, gate: &Var<T>) -> Var<T> {
        autograd::mul(x, gate)
    }

    fn resize(&mut self, _: &str, x: &Var<T>, h: usize, w: usize) -> Var<T> {
        autograd::resize(x, h, w)
    }

    fn concat(&mut self, _: &str, xs: &[Var<T>]) -> Var<T> {
        if xs.len() == 1 {
            return xs[0].clone();
        }
        autograd::concat(xs)
    }

    fn select(&mut self, _: &str, x: &Var<T>, channels: &[usize]) -> Var<T> {
        autograd::select_channels(x, channels)
    }
}
