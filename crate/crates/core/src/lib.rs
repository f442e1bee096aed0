//! Iterative magnitude pruning of a small convolutional classifier, with
//! concept-based (global) and Grad-CAM (local) explanations extracted at
//! every pruning round and compared across rounds.

pub mod autodiff;
pub mod concepts;
pub mod consistency;
pub mod container;
pub mod error;
pub mod gradcam;
mod kernels;
pub mod network;
pub mod pcbm;
pub mod pgm;
pub mod pruning;
pub mod synth;
pub mod tensor;

pub use autodiff::{NodeId, Tape};
pub use error::{Error, Result};
pub use network::{Architecture, Model};
pub use pruning::{PruneMask, PruneSchedule};
pub use tensor::Tensor;
