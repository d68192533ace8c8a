//! Continual pretraining for small 3D-CNN video backbones, with almost all
//! of the learning pushed into lightweight adapter modules.
//!
//! The crate covers the full pipeline for adapting a generally pretrained
//! video model to a new assessment domain without touching the backbone
//! weights: lightweight 3D-Adapter bottlenecks inserted after each block,
//! a self-supervised segment-pace pretext task for the continual stage, and
//! score-distribution / pairwise-difference heads for the supervised stage.
//! A synthetic video generator and rank-correlation metrics make the whole
//! loop runnable end to end on a laptop CPU.
//!
//! Modules are layered bottom-up: [`tensor`] and [`ops`] hold the dense
//! kernels, [`nn`] the differentiable layers, [`adapter`] / [`backbone`] the
//! model, [`pretext`] / [`heads`] the objectives, and [`trainer`] ties them
//! together with [`data`], [`checkpoint`], [`metrics`] and [`config`].

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod par;
pub mod pretext;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
