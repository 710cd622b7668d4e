//! Files, run artifacts and the `osda` command line around `osda-core`.
//!
//! - [`table`]: the feature-table CSV.
//! - [`checkpoint`]: binary model checkpoints.
//! - [`run`]: run manifest, JSON Lines training log, threshold and audit CSVs.
//! - [`predict`]: parallel evaluation of a frozen model.
//! - [`cli`]: the `generate`, `train`, `eval` and `sweep` subcommands.

pub mod checkpoint;
pub mod cli;
pub mod fmt;
pub mod predict;
pub mod run;
pub mod table;
