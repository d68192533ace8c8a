//! Differentiable layers with explicit, hand-written backward passes.
//!
//! Layers cache whatever the backward pass needs during a training forward
//! (`train = true`) and release it when `backward` runs. Evaluation forwards
//! cache nothing. Weight gradients are skipped entirely for parameters whose
//! `trainable` flag is off — that is how freeze policies guarantee frozen
//! weights never accumulate gradient — while input gradients always flow so
//! trainable layers deeper in the graph still learn.

mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod relu;

pub use conv::Conv3d;
pub use linear::Linear;
pub use loss::{cross_entropy_grad, kl_target_grad, log_softmax, softmax};
pub use norm::BatchNorm3d;
pub use pool::{GlobalAvgPool, MaxPool3d};
pub use relu::Relu;

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which part of the model a parameter belongs to; freeze policies and
/// trainability reports group by this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    BackboneConv,
    BnAffine,
    Adapter,
    Head,
}

impl ParamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamKind::BackboneConv => "backbone_conv",
            ParamKind::BnAffine => "bn_affine",
            ParamKind::Adapter => "adapter",
            ParamKind::Head => "head",
        }
    }
}

/// A named, optionally trainable tensor. Gradient storage is allocated on
/// first accumulation so frozen giants never pay for grad buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        Param { name: name.into(), kind, value, grad: None, trainable: true }
    }

    pub fn accumulate_grad(&mut self, g: Tensor) {
        debug_assert!(self.value.same_shape(&g), "grad shape mismatch for {}", self.name);
        match &mut self.grad {
            Some(acc) => acc.add_assign(&g),
            None => self.grad = Some(g),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Non-learned state that still has to survive checkpointing
/// (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

impl Buffer {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Buffer { name: name.into(), value }
    }
}
