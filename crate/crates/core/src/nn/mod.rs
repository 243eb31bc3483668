//! Dense and graph-convolution networks with hand-derived gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport, MseObjective, Objective};
pub use layers::{LayerKind, LayerSpec, Mode};
pub use network::{build_layers, mse_with_grad, sgd_step, ArchConfig, Masks, NetworkModel, Tape, Variant};
pub use tensor::Tensor2;
