//! Meta-learned SIREN initializations with per-parameter, per-step learning
//! rates, trained end to end with a Transformer that classifies the fitted
//! SIREN weights directly.
//!
//! Layout:
//! - [`tensor`]: dense tensors, reverse-mode tape, SGD/Adam/AdamW
//! - [`siren`]: SIREN definition, coordinate grids, on-tape inner gradient
//! - [`metalearn`]: unrolled inner loop and outer meta-updates
//! - [`classifier`]: weight tokenization and the pre-norm Transformer
//! - [`data`]: IDX / CIFAR-10 / image-folder loaders and augmentation
//! - [`harness`]: configuration, checkpoints, metrics and run commands

pub mod classifier;
pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod metalearn;
pub mod siren;
pub mod tensor;

pub use tensor::{Real, Tape, Tensor, TensorError, Var};
