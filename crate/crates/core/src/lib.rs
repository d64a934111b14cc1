//! Style-attentional arbitrary style transfer at desk scale.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode
//! differentiation ([`graph`]), the attention-based transfer network
//! ([`network`]), its losses and training loop, inference-time feature
//! controls, and independent oracles used to verify all of it ([`verify`]).

pub mod bench;
pub mod controls;
pub mod graph;
pub mod image_io;
pub mod kernels;
pub mod losses;
pub mod network;
pub mod tensor;
pub mod training;
pub mod verify;

pub use graph::{Gradients, Graph, Var};
pub use image_io::{Image, ImageError, SynthKind};
pub use kernels::Padding;
pub use losses::{LossReport, LossWeights};
pub use network::{FeatureMap, Level, NetConfig, SanetParams, TransformNet};
pub use tensor::{Scalar, Shape, Tensor, TensorError};
