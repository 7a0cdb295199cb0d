use crate::archspec::{NetworkSpec, NUM_STAGES};
use crate::autograd::Var;
use crate::tensor::{Real, Shape, Tensor};

use super::modules::{geometry, Block, ConvUnit, Interaction, Registry, UnitOpts};
use super::ops::{Exec, Mode, Ops, Weights};
use super::{BlockKind, InteractionKind, NetError, MIN_INPUT};

/// Stages (1-based) whose ends carry interaction modules.
pub const INTERACTION_STAGES: [usize; 3] = [3, 4, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct PathModules {
    pub ratio: crate::archspec::ScalingRatio,
    pub stages: [Vec<Block>; NUM_STAGES],
}

/// The module tree of one network, without weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub spec: NetworkSpec,
    pub block_kind: BlockKind,
    pub interaction_kind: InteractionKind,
    pub num_classes: usize,
    pub paths: Vec<PathModules>,
    /// `interactions[s][p]` sits after stage `INTERACTION_STAGES[s]` between
    /// paths `p` and `p + 1`.
    pub interactions: Vec<Vec<Interaction>>,
    pub head: ConvUnit,
    pub classifier: ConvUnit,
    pub registry: Registry,
}

impl Architecture {
    pub fn new(
        spec: &NetworkSpec,
        block_kind: BlockKind,
        interaction_kind: InteractionKind,
        num_classes: usize,
    ) -> Result<Self, NetError> {
        spec.check()?;
        if num_classes < 2 {
            return Err(NetError::NumClasses(num_classes));
        }
        let ratios = spec.active_ratios();
        if interaction_kind != InteractionKind::None && ratios.len() < 2 {
            return Err(NetError::SinglePathInteraction(interaction_kind));
        }
        let mut reg = Registry::default();
        let widths = spec.widths.map(|w| w as usize);
        let mut paths = Vec::with_capacity(ratios.len());
        for (pi, &ratio) in ratios.iter().enumerate() {
            let stages = std::array::from_fn(|j| {
                let mut cin = if j == 0 { 3 } else { widths[j - 1] };
                (0..spec.depths[j] as usize)
                    .map(|b| {
                        let stride = if b == 0 && j < 4 { 2 } else { 1 };
                        let prefix = format!("path{}/stage{}/block{}", pi + 1, j + 1, b + 1);
                        let block = Block::build(&mut reg, block_kind, &prefix, cin, widths[j], stride);
                        cin = widths[j];
                        block
                    })
                    .collect()
            });
            paths.push(PathModules { ratio, stages });
        }
        let interactions = INTERACTION_STAGES
            .iter()
            .map(|&stage| {
                (0..ratios.len().saturating_sub(1))
                    .filter_map(|p| {
                        let prefix = format!("stage{stage}/interact{}{}", p + 1, p + 2);
                        Interaction::build(&mut reg, interaction_kind, &prefix, widths[stage - 1])
                    })
                    .collect()
            })
            .collect();
        let c5 = widths[4];
        let head = reg.conv_unit("head", geometry(c5 * ratios.len(), c5, 3, 1, 1), UnitOpts::CBR);
        let classifier = reg.conv_unit("classifier", geometry(c5, num_classes, 1, 1, 1), UnitOpts::LINEAR);
        Ok(Architecture {
            spec: spec.clone(),
            block_kind,
            interaction_kind,
            num_classes,
            paths,
            interactions,
            head,
            classifier,
            registry: reg,
        })
    }

    /// Input extent of every path for an `h x w` image.
    pub fn path_inputs(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.paths
            .iter()
            .map(|p| (p.ratio.scaled_extent16(h), p.ratio.scaled_extent16(w)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.registry.num_params()
    }

    /// Runs every path with interactions, then aggregation, head and the final
    /// upsampling back to the input size.
    pub fn run<O: Ops>(&self, ops: &mut O, input: &O::Value) -> O::Value {
        let s = ops.shape_of(input);
        let mut feats: Vec<O::Value> = self
            .path_inputs(s.h, s.w)
            .into_iter()
            .enumerate()
            .map(|(i, (h, w))| ops.resize(&format!("path{}/resize", i + 1), input, h, w))
            .collect();
        for j in 0..NUM_STAGES {
            for (path, x) in self.paths.iter().zip(feats.iter_mut()) {
                for block in &path.stages[j] {
                    *x = block.forward(ops, x);
                }
            }
            if let Some(slot) = INTERACTION_STAGES.iter().position(|&st| st == j + 1) {
                for (p, module) in self.interactions[slot].iter().enumerate() {
                    let (hi, lo) = module.forward(ops, &feats[p], &feats[p + 1]);
                    feats[p] = hi;
                    feats[p + 1] = lo;
                }
            }
        }
        let scores = self.aggregate_and_head(ops, &feats);
        ops.resize("output/resize", &scores, s.h, s.w)
    }

    /// Upsamples path outputs to the largest extent, concatenates them and
    /// applies the segmentation head.
    pub fn aggregate_and_head<O: Ops>(&self, ops: &mut O, feats: &[O::Value]) -> O::Value {
        aggregate_and_head(ops, feats, &self.head, &self.classifier)
    }
}

pub fn aggregate_and_head<O: Ops>(
    ops: &mut O,
    feats: &[O::Value],
    head: &ConvUnit,
    classifier: &ConvUnit,
) -> O::Value {
    let shapes: Vec<Shape> = feats.iter().map(|f| ops.shape_of(f)).collect();
    let h = shapes.iter().map(|s| s.h).max().unwrap_or(1);
    let w = shapes.iter().map(|s| s.w).max().unwrap_or(1);
    let up: Vec<O::Value> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| ops.resize(&format!("aggregate/resize{}", i + 1), f, h, w))
        .collect();
    let cat = ops.concat("aggregate/concat", &up);
    let x = ops.conv_unit(head, &cat);
    ops.conv_unit(classifier, &x)
}

/// A network with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance<T: Real = f32> {
    pub arch: Architecture,
    pub weights: Weights<T>,
    pub seed: u64,
}

impl<T: Real> NetworkInstance<T> {
    pub fn build(
        spec: &NetworkSpec,
        block_kind: BlockKind,
        interaction_kind: InteractionKind,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, NetError> {
        let arch = Architecture::new(spec, block_kind, interaction_kind, num_classes)?;
        let weights = arch.registry.init_weights(seed);
        Ok(NetworkInstance { arch, weights, seed })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.arch.spec
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    pub fn check_input(&self, shape: Shape) -> Result<(), NetError> {
        if shape.c != 3 {
            return Err(NetError::InputChannels(shape.c));
        }
        if shape.h < MIN_INPUT || shape.w < MIN_INPUT {
            return Err(NetError::InputTooSmall {
                h: shape.h,
                w: shape.w,
                min: MIN_INPUT,
            });
        }
        Ok(())
    }

    /// Inference: running normalization statistics, no gradient tracking.
    /// `image` is `(n, 3, H, W)`; the result is `(n, num_classes, H, W)`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        self.check_input(image.shape())?;
        let mut exec = Exec::new(&self.weights, Mode::Eval, false);
        let out = self.arch.run(&mut exec, &Var::constant(image.clone()));
        Ok(out.value().clone())
    }

    /// Forward pass for training: batch statistics and a gradient tape.
    pub fn forward_train<'a>(&'a self, image: &Tensor<T>) -> Result<(Var<T>, Exec<'a, T>), NetError> {
        self.check_input(image.shape())?;
        let mut exec = Exec::new(&self.weights, Mode::Train, true);
        let out = self.arch.run(&mut exec, &Var::constant(image.clone()));
        Ok((out, exec))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.arch.registry.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        let i = self.arch.registry.params.iter().position(|p| p.name == name)?;
        Some(&self.weights.params[i])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), NetError> {
        let i = self
            .arch
            .registry
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))?;
        if value.shape() != self.weights.params[i].shape() {
            return Err(NetError::ParamShape(name.to_string()));
        }
        self.weights.params[i] = value;
        Ok(())
    }

    /// Same network and weights in another precision.
    pub fn cast<U: Real>(&self) -> NetworkInstance<U> {
        NetworkInstance {
            arch: self.arch.clone(),
            weights: Weights {
                params: self.weights.params.iter().map(Tensor::cast).collect(),
                buffers: self.weights.buffers.iter().map(Tensor::cast).collect(),
            },
            seed: self.seed,
        }
    }
}
