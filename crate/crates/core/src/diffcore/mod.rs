//! Feedforward networks and the reverse-mode machinery used to train them.

mod activation;
mod network;
mod params;
mod tape;

pub use activation::{smoothed_relu, smoothed_relu_derivative, Activation};
pub use network::{Layer, Network};
pub use params::{ParamKind, ParamLayout, ParamSlot, ParamVector};
pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid layer dimensions {0:?}: need at least two positive entries")]
    InvalidDims(Vec<usize>),
    #[error("smoothing width must be positive and finite, got {0}")]
    InvalidSmoothing(f64),
    #[error("layer {layer} does not chain with its neighbours")]
    LayerShape { layer: usize },
    #[error("layer {layer} holds a non-finite parameter")]
    NonFiniteParameter { layer: usize },
    #[error("input has dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected a scalar output, got {0} components")]
    NotScalar(usize),
    #[error("non-finite value at {node}")]
    NonFiniteValue { node: String },
    #[error("parameter vector layout does not match the networks")]
    LayoutMismatch,
}
