//! Prompt learning with attention-gated visual tokens over frozen toy
//! vision and text encoders.
//!
//! Module map:
//! - [`tensor`]: dense tensors, a reverse-mode tape and a finite-difference checker
//! - [`encoders`]: frozen vision and text encoders sharing one embedding space
//! - [`promptcore`]: style statistics, multi-scale fusion, injection block, prompt assembly
//! - [`losses`]: cosine softmax, cross-entropy, the token decorrelation penalty, prediction
//! - [`baselines`]: zero-shot, linear probe, learned context and meta-network conditioned prompts
//! - [`model`]: one forward/loss path shared by every prompt-based method
//! - [`datagen`]: synthetic multi-domain images and protocol splits

pub mod baselines;
pub mod datagen;
pub mod encoders;
mod error;
pub mod losses;
pub mod model;
pub mod promptcore;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
