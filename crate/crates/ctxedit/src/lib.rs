//! Context-aware instruction-guided image editing on synthetic scenes.
//!
//! The pipeline takes a scene image and a list of edit instructions, decides
//! per instruction whether it is applicable to the scene, decodes a binary
//! editing mask for each applicable one, and drives a small latent diffusion
//! editor whose cross-attention is modulated by those masks so that only the
//! requested regions change. A surrogate scorer allows a refinement phase to
//! sharpen masks without backpropagating through the sampler.
//!
//! Everything is self-contained: a seeded synthetic world provides scenes,
//! instructions, ground-truth masks and goal images; deterministic stub
//! encoders replace pretrained vision/text backbones; a minimal f64
//! gradient tape supplies training.

pub mod broadcaster;
pub mod checkpoint;
pub mod cli;
pub mod decoder;
pub mod editor;
pub mod encoders;
pub mod error;
pub mod head;
pub mod image;
pub mod layers;
pub mod kvrecord;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod seeds;
pub mod surrogate;
pub mod trainer;
pub mod vocab;
pub mod world;

pub use numerics::{NumResult, Tensor, TensorError};
