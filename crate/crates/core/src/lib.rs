//! Multi-path real-time semantic segmentation networks, their cost model, a
//! small training and evaluation harness, and a latency-aware progressive
//! expansion search.
//!
//! Module map:
//!
//! - [`archspec`]: network descriptors, the expansion-op catalog, presets.
//! - [`netcore`]: building and running networks (blocks, interactions, heads).
//! - [`costmodel`]: exact FLOPs and parameters, latency measurement and estimation.
//! - [`evaluation`]: datasets, training, confusion matrices and mIoU.
//! - [`expander`]: the step-size rule, candidate selection and full trajectories.
//! - [`cli`]: the `lpsnet` command-line interface.
//!
//! [`tensor`] and [`autograd`] are the numeric substrate underneath.

pub mod archspec;
pub mod autograd;
pub mod cli;
pub mod costmodel;
pub mod evaluation;
pub mod expander;
pub mod netcore;
pub mod tensor;
