//! One block on its own, for micro-benchmarks and block comparisons.

use crate::autograd::Var;
use crate::tensor::{Real, Shape, Tensor};

use super::modules::{Block, Registry};
use super::ops::{Exec, Mode, Ops, Weights};
use super::{BlockKind, NetError};

/// A channel-preserving, stride-1 block of one kind with its own weights.
#[derive(Debug, Clone)]
pub struct BlockModule<T: Real = f32> {
    pub kind: BlockKind,
    pub channels: usize,
    pub block: Block,
    pub registry: Registry,
    pub weights: Weights<T>,
}

impl<T: Real> BlockModule<T> {
    pub fn new(kind: BlockKind, channels: usize, seed: u64) -> Result<Self, NetError> {
        if channels == 0 {
            return Err(NetError::BlockChannels(channels));
        }
        let mut registry = Registry::default();
        let block = Block::build(&mut registry, kind, "block", channels, channels, 1);
        let weights = registry.init_weights(seed);
        Ok(BlockModule {
            kind,
            channels,
            block,
            registry,
            weights,
        })
    }

    pub fn num_params(&self) -> usize {
        self.registry.num_params()
    }

    /// Runs the block on any backend.
    pub fn run<O: Ops>(&self, ops: &mut O, x: &O::Value) -> O::Value {
        self.block.forward(ops, x)
    }

    /// Inference on `(n, channels, h, w)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let s: Shape = x.shape();
        if s.c != self.channels {
            return Err(NetError::BlockInput {
                expected: self.channels,
                got: s.c,
            });
        }
        let mut exec = Exec::new(&self.weights, Mode::Eval, false);
        Ok(self.run(&mut exec, &Var::constant(x.clone())).value().clone())
    }
}
