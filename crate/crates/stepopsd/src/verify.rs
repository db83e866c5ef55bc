//! Property verifiers behind `stepopsd verify`.

use serde::{Deserialize, Serialize};
use stepopsd_core::diag::{
    verify_sign_preservation, verify_variance_bound, AlignmentReport, SignReport, VarianceReport, VarianceTestConfig,
};
use stepopsd_core::env::{EnvKind, Environment};
use stepopsd_core::shaping::lambda_schedule;
use stepopsd_core::train::{TrainConfig, Trainer};

use crate::error::Result;

/// Default case count for the sign check.
pub const SIGN_CASES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCheck {
    /// At λ(0) of the configured schedule.
    pub shaped: AlignmentReport,
    /// At λ = 0, where the cosine must be exactly 1.
    pub neutral: AlignmentReport,
    pub passed: bool,
}

fn alignment_with<E: Environment>(env: E, cfg: &TrainConfig) -> Result<AlignmentCheck> {
    let tr = Trainer::new(env, cfg.clone())?;
    let shaped = tr.alignment_probe(lambda_schedule(0, &cfg.shaping))?;
    let neutral = tr.alignment_probe(0.0)?;
    let passed = shaped.proportional && neutral.proportional && neutral.cosine.is_none_or(|c| c == 1.0);
    Ok(AlignmentCheck {
        shaped,
        neutral,
        passed,
    })
}

/// Per-token proportionality and batch cosine on a real rollout batch
/// drawn from the warm-started policy of `cfg`.
pub fn alignment(cfg: &TrainConfig) -> Result<AlignmentCheck> {
    cfg.validate()?;
    match cfg.env {
        EnvKind::LatchWorld => alignment_with(cfg.latchworld(), cfg),
        EnvKind::FactChain => alignment_with(cfg.factchain(), cfg),
    }
}

pub fn sign(n: usize, seed: u64) -> Result<SignReport> {
    Ok(verify_sign_preservation(n, seed)?)
}

pub fn variance(cfg: &VarianceTestConfig) -> Result<VarianceReport> {
    Ok(verify_variance_bound(cfg)?)
}
