//! Transfer-learning engine for VGG-style convolutional networks.
//!
//! Two-stage training: [`train::pretrain`] fits a randomly initialised
//! backbone plus head on a pretext task with Adagrad, then
//! [`train::fine_tune`] loads that backbone, grafts a fresh head, freezes
//! the convolutional blocks and trains the head with momentum SGD.

pub mod checkpoint;
pub mod data;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod optim;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use network::{build_backbone, ArchProfile, HeadKind, Mode, Network};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
