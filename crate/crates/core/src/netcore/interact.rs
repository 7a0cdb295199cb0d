use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

use super::modules::{Interaction, Registry};
use super::ops::{Exec, Mode, Weights};
use super::{InteractionKind, NetError};

/// A single interaction module with its own weights, for use outside a network.
#[derive(Debug, Clone)]
pub struct InteractionModule<T: Real = f32> {
    pub kind: InteractionKind,
    module: Interaction,
    registry: Registry,
    weights: Weights<T>,
}

impl<T: Real> InteractionModule<T> {
    pub fn new(kind: InteractionKind, channels: usize, seed: u64) -> Result<Self, NetError> {
        let mut registry = Registry::default();
        let module = Interaction::build(&mut registry, kind, "interact", channels).ok_or(NetError::NoInteraction)?;
        let weights = registry.init_weights(seed);
        Ok(InteractionModule {
            kind,
            module,
            registry,
            weights,
        })
    }

    pub fn num_params(&self) -> usize {
        self.registry.num_params()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.registry.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), NetError> {
        let i = self
            .registry
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))?;
        if self.weights.params[i].shape() != value.shape() {
            return Err(NetError::ParamShape(name.to_string()));
        }
        self.weights.params[i] = value;
        Ok(())
    }

    /// Runs the module in inference mode on a `(high, low)` pair.
    pub fn forward(&self, high: &Tensor<T>, low: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NetError> {
        check_pair(high, low)?;
        let mut exec = Exec::new(&self.weights, Mode::Eval, false);
        let (h, l) = self
            .module
            .forward(&mut exec, &Var::constant(high.clone()), &Var::constant(low.clone()));
        Ok((h.value().clone(), l.value().clone()))
    }
}

fn check_pair<T: Real>(high: &Tensor<T>, low: &Tensor<T>) -> Result<(), NetError> {
    let (hs, ls) = (high.shape(), low.shape());
    if hs.c != ls.c {
        return Err(NetError::ChannelMismatch { high: hs.c, low: ls.c });
    }
    if hs.h < ls.h || hs.w < ls.w {
        return Err(NetError::SpatialOrder {
            high_h: hs.h,
            high_w: hs.w,
            low_h: ls.h,
            low_w: ls.w,
        });
    }
    Ok(())
}

/// The parameter-free exchange: `high + up(low)` and `low + down(high)`.
pub fn interact_bilateral_b<T: Real>(
    high: &Tensor<T>,
    low: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), NetError> {
    InteractionModule::new(InteractionKind::BilateralB, high.shape().c, 0)?.forward(high, low)
}
