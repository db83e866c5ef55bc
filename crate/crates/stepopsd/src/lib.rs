//! File formats, the training driver and the `stepopsd` command line on top
//! of [`stepopsd_core`].
//!
//! - [`jsonl`]: rollout groups, one JSON object per line.
//! - [`snapshot`]: sparse binary policy snapshots.
//! - [`config`]: TOML run configuration.
//! - [`run`]: training with metrics, snapshots and rollouts on disk.
//! - [`shape`]: offline shaping of rollout files.
//! - [`diagnose`]: windowed Δ statistics and plot data.
//! - [`verify`]: sign, variance and gradient-alignment checks.

pub mod config;
pub mod diagnose;
pub mod error;
pub mod jsonl;
pub mod run;
pub mod shape;
pub mod snapshot;
pub mod verify;

pub use error::{Error, Result};
