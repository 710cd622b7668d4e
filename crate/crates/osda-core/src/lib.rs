//! Open-set domain adaptation with dual multi-class classifiers, a self-tuned
//! instructive threshold and multi-criteria cross-domain mixup.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches the file
//! system, the clock or a terminal lives in the `osda-lab` companion crate.
//!
//! Layout:
//! - [`autodiff`]: dense `f64` tensors on a reverse-mode tape, including the
//!   gradient-reversal, stop-gradient and nuclear-norm nodes.
//! - [`nn`]: feature extractor, the three classifier families and the model bundle.
//! - [`optim`]: Nesterov SGD with weight decay and the inverse learning-rate decay.
//! - [`dmc`]: source losses, the weighted adversarial loss and the auxiliary
//!   nuclear-norm discrepancy.
//! - [`threshold`]: the per-epoch instructive threshold.
//! - [`cmmc`]: commonness criteria, gated mixup pairing and the mixup loss.
//! - [`data`]: synthetic open-set tasks and mini-batch streams.
//! - [`metrics`] and [`trainer`]: decision rules, OS/OS*/Unk/H-score and the
//!   full pretrain + alternating training loop.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod cmmc;
pub mod data;
pub mod dmc;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod threshold;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
