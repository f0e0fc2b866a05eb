//! Prompt-free segmentation with hierarchical self-prompting.
//!
//! A ViT-style encoder with frozen base weights and LoRA adapters receives
//! learnable Q-prompts at each global-attention block. A bottleneck maps
//! every Q-prompt to an A-prompt that conditions a per-layer mask decoder
//! block, and the decoder blocks are chained from the deepest tap to the
//! shallowest with skip connections from the deepest output.

pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod loss_metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod self_prompt;
pub mod trainer;

pub use error::{Error, Result};
