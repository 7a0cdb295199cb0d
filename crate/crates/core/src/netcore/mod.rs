//! Multi-path segmentation networks.
//!
//! Each active path resizes the input by its ratio (snapped to a multiple of
//! 16), runs five stages of blocks (stages 1 to 4 open with a stride-2 block),
//! and exchanges features with its neighbours at the end of stages 3, 4 and 5.
//! Path outputs are upsampled to the largest path extent, concatenated, passed
//! through a 3x3 head and a 1x1 classifier, and bilinearly upsampled to the
//! input size.

use std::fmt;
use std::str::FromStr;

use crate::archspec::SpecError;

mod block;
pub mod checkpoint;
mod interact;
pub mod modules;
mod network;
pub mod ops;

pub use block::BlockModule;
pub use interact::{interact_bilateral_b, InteractionModule};
pub use network::{aggregate_and_head, Architecture, NetworkInstance, PathModules, INTERACTION_STAGES};
pub use ops::{Exec, Mode, Ops, Weights};

/// Smallest accepted input height and width.
pub const MIN_INPUT: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("interaction {0} needs at least two active paths")]
    SinglePathInteraction(InteractionKind),
    #[error("num_classes must be at least 2, got {0}")]
    NumClasses(usize),
    #[error("input must have 3 channels, got {0}")]
    InputChannels(usize),
    #[error("input {h}x{w} is below the {min}x{min} minimum")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("channel mismatch: high-resolution map has {high}, low-resolution map has {low}")]
    ChannelMismatch { high: usize, low: usize },
    #[error("high-resolution map {high_h}x{high_w} is smaller than low-resolution map {low_h}x{low_w}")]
    SpatialOrder {
        high_h: usize,
        high_w: usize,
        low_h: usize,
        low_w: usize,
    },
    #[error("interaction kind None has no module")]
    NoInteraction,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("shape mismatch for parameter `{0}`")]
    ParamShape(String),
    #[error("block needs at least one channel, got {0}")]
    BlockChannels(usize),
    #[error("block expects {expected} input channels, got {got}")]
    BlockInput { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Conv3x3,
    SepConv3x3,
    Residual,
    Bottleneck,
    ShuffleUnit,
    InvertedResidual,
    GhostModule,
}

impl BlockKind {
    pub const ALL: [BlockKind; 7] = [
        BlockKind::Conv3x3,
        BlockKind::SepConv3x3,
        BlockKind::Residual,
        BlockKind::Bottleneck,
        BlockKind::ShuffleUnit,
        BlockKind::InvertedResidual,
        BlockKind::GhostModule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Conv3x3 => "conv3x3",
            BlockKind::SepConv3x3 => "sepconv3x3",
            BlockKind::Residual => "residual",
            BlockKind::Bottleneck => "bottleneck",
            BlockKind::ShuffleUnit => "shuffle",
            BlockKind::InvertedResidual => "inverted-residual",
            BlockKind::GhostModule => "ghost",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| format!("unknown block kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InteractionKind {
    None,
    DirectA,
    DirectB,
    AttentionA,
    AttentionB,
    BilateralA,
    #[default]
    BilateralB,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 7] = [
        InteractionKind::None,
        InteractionKind::DirectA,
        InteractionKind::DirectB,
        InteractionKind::AttentionA,
        InteractionKind::AttentionB,
        InteractionKind::BilateralA,
        InteractionKind::BilateralB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InteractionKind::None => "none",
            InteractionKind::DirectA => "direct-a",
            InteractionKind::DirectB => "direct-b",
            InteractionKind::AttentionA => "attention-a",
            InteractionKind::AttentionB => "attention-b",
            InteractionKind::BilateralA => "bilateral-a",
            InteractionKind::BilateralB => "bilateral-b",
        }
    }
}

/// `preferred` when `spec` has at least two paths, otherwise `None`.
pub fn interaction_for(spec: &crate::archspec::NetworkSpec, preferred: InteractionKind) -> InteractionKind {
    if spec.num_paths() < 2 {
        InteractionKind::None
    } else {
        preferred
    }
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for InteractionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        InteractionKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| format!("unknown interaction kind `{s}`"))
    }
}
