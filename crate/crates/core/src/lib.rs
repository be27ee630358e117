//! Spiking self-cross feature network for few-shot image classification.
//!
//! The crate provides the full pipeline: a dense f64 tensor type with
//! reverse-mode autodiff ([`tensor`]), leaky integrate-and-fire dynamics
//! with surrogate gradients ([`spiking`]), spiking convolutional backbones
//! ([`backbone`]), the self-feature extractor ([`sfe`]) and cross-feature
//! contrastive attention ([`cfc`]) modules, the combined training losses
//! ([`losses`]), the episodic few-shot data pipeline ([`fewshot`]), and
//! synaptic-operation energy accounting ([`energy`]).

pub mod backbone;
pub mod cfc;
pub mod energy;
pub mod fewshot;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sfe;
pub mod spiking;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
