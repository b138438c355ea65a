//! Dense nested attention network for infrared small-target segmentation.
//!
//! The crate is `no_std` + `alloc`: tensors, a reverse-mode autograd tape,
//! the transformer backbone, the dense node grid with its residual CBAM and
//! ACmix processors, the five-output fusion head, the weighted Dice/BCE
//! loss, detection metrics, the synthetic target generator, and the Adagrad
//! training loop. File formats and the CLI live in the `idnanet` companion
//! crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod blocks;
pub mod data;
pub mod error;
pub mod head;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nest;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{Sample, SynthConfig};
pub use error::{Error, Result};
pub use model::{Idnanet, ModelConfig};
pub use train::{Network, TrainConfig, Trainer};
pub use params::{Init, ParamBuilder, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
