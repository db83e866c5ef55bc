//! Step-level hindsight advantage shaping on top of group-relative policy
//! optimization.
//!
//! A training step runs
//! rollout → reward → step extraction → teacher/student rescoring →
//! advantage shaping → policy update. Every stage is a pure function of its
//! inputs and lives in its own module:
//!
//! - [`trajectory`]: tokens, trajectories, rollout groups.
//! - [`extract`]: tag-aligned step segmentation (`action_only`,
//!   `clean_step_no_observation`).
//! - [`teacher`]: stale reference snapshots, peer selection, hindsight contexts.
//! - [`rescore`]: per-token teacher/student log-probability gaps.
//! - [`shaping`]: sign-preserving clipped multiplicative advantage shaping.
//! - [`grpo`]: penalties, group-relative advantages, KL, the policy update.
//! - [`policy`], [`env`], [`rollout`]: the toy harness (feature-hashed softmax
//!   policy and two deterministic text environments).
//! - [`train`]: the per-step pipeline driver.
//! - [`diag`]: windowed gap statistics and the property verifiers.
//!
//! The crate is `no_std` and only needs `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod diag;
pub mod env;
pub mod error;
pub mod extract;
pub mod grpo;
pub mod policy;
pub mod rescore;
pub mod rollout;
pub mod shaping;
pub mod teacher;
pub mod train;
pub mod trajectory;
pub mod vocab;

mod rng;

pub use error::{Error, Result};
pub use extract::{extract_steps, mask_observations, ExtractionMode, StepSegment};
pub use policy::PolicyParams;
pub use shaping::{ShapedAdvantage, ShapingConfig};
pub use teacher::TeacherSnapshot;
pub use trajectory::{RolloutGroup, Role, Span, TokenRecord, Trajectory};
