//! Conditional rectified-flow models on toy worlds, post-trained with
//! group-relative policy optimization against a self-denoising reward.
//!
//! Layout:
//! - [`world`]: synthetic conditional distributions with exact densities.
//! - [`model`]: the velocity network, its adapters, and reverse-mode gradients.
//! - [`flow`]: pretraining loss, guidance, ODE and SDE samplers.
//! - [`reward`]: the self-confidence reward.
//! - [`grpo`]: advantages, ratios, the clipped surrogate and KL anchor.
//! - [`trainer`]: pretraining and post-training loops.
//! - [`optim`], [`checkpoint`], [`rng`]: supporting pieces.

// `!(x > 0.0)` guards are written that way so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod grpo;
pub mod model;
pub mod optim;
pub mod reward;
pub mod rng;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use model::{ModelParams, VelocityField};
pub use world::{PromptContext, ToyWorld};
