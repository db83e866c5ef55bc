//! Sign-preserving multiplicative advantage shaping.
//!
//! Per included token: `w_raw = 2σ(sign(A)·Δ)`, modifications `m = w_raw − 1`
//! rescaled to an equal mean-abs budget per step, `w = clip(1 + m', 1 ± α)`,
//! `Ψ = 1 − λ + λw`, `Ã = Ψ·A`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::StepSegment;
use crate::rescore::GapRecord;

/// Steps whose mean |m| is below this are left out of the budget.
pub const ELIGIBILITY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    EqualStepMeanAbs,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    pub lambda_mix_initial: f64,
    pub alpha_clip: f64,
    pub decay_horizon: u64,
    pub normalization: Normalization,
    pub teacher_refresh_interval: u64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            lambda_mix_initial: 0.2,
            alpha_clip: 0.2,
            decay_horizon: 50,
            normalization: Normalization::EqualStepMeanAbs,
            teacher_refresh_interval: 10,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.lambda_mix_initial;
        if !(0.0..1.0).contains(&l) {
            return Err(Error::Config(alloc::format!("lambda_mix_initial must be in [0, 1), got {l}")));
        }
        let a = self.alpha_clip;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(alloc::format!("alpha_clip must be in (0, 1), got {a}")));
        }
        if self.decay_horizon == 0 {
            return Err(Error::Config("decay_horizon must be >= 1".into()));
        }
        if self.teacher_refresh_interval == 0 {
            return Err(Error::Config("teacher_refresh_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-token shaping record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapedAdvantage {
    pub index: usize,
    pub a_base: f64,
    /// `None` for tokens outside every step or in unshaped trajectories.
    pub delta: Option<f64>,
    pub w_raw: f64,
    pub w_final: f64,
    pub psi: f64,
    pub a_shaped: f64,
    /// Whether the projection changed the weight.
    pub clipped: bool,
}

impl ShapedAdvantage {
    pub fn neutral(index: usize, a_base: f64) -> Self {
        Self {
            index,
            a_base,
            delta: None,
            w_raw: 1.0,
            w_final: 1.0,
            psi: 1.0,
            a_shaped: a_base,
            clipped: false,
        }
    }
}

pub fn sign(a: f64) -> i8 {
    if a > 0.0 {
        1
    } else if a < 0.0 {
        -1
    } else {
        0
    }
}

/// `2σ(a_sign · delta)`; exactly 1 when `a_sign == 0`.
pub fn raw_weight(a_sign: i8, delta: f64) -> f64 {
    if a_sign == 0 {
        return 1.0;
    }
    let x = a_sign as f64 * delta;
    2.0 / (1.0 + libm::exp(-x))
}

fn mean_abs(m: &[f64]) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.iter().map(|x| x.abs()).sum::<f64>() / m.len() as f64
    }
}

/// Rescales each eligible step's modifications to the shared mean-abs budget.
pub fn normalize_equal_step(steps: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let means: Vec<f64> = steps.iter().map(|m| mean_abs(m)).collect();
    let eligible: Vec<f64> = means.iter().copied().filter(|&x| x >= ELIGIBILITY_EPS).collect();
    if eligible.is_empty() {
        return steps.to_vec();
    }
    let budget = eligible.iter().sum::<f64>() / eligible.len() as f64;
    steps
        .iter()
        .zip(&means)
        .map(|(m, &mk)| {
            if mk >= ELIGIBILITY_EPS {
                let s = budget / mk;
                m.iter().map(|x| x * s).collect()
            } else {
                m.clone()
            }
        })
        .collect()
}

pub fn clip_weight(w: f64, alpha: f64) -> f64 {
    w.clamp(1.0 - alpha, 1.0 + alpha)
}

/// `(Ψ, Ψ·A)` with `Ψ = 1 − λ + λw`.
pub fn mix_advantage(a_base: f64, w_final: f64, lambda: f64) -> (f64, f64) {
    let psi = 1.0 - lambda + lambda * w_final;
    (psi, psi * a_base)
}

/// `λ0 · max(0, 1 − t/H)`.
pub fn lambda_schedule(step: u64, cfg: &ShapingConfig) -> f64 {
    let frac = 1.0 - step as f64 / cfg.decay_horizon as f64;
    cfg.lambda_mix_initial * frac.max(0.0)
}

/// Shapes one trajectory's token advantages.
///
/// `gaps[k]` holds the records for `segments[k]`'s included tokens in order.
/// With `shaped == false` every token keeps Ψ = 1.
pub fn shape_trajectory(
    segments: &[StepSegment],
    gaps: &[Vec<GapRecord>],
    token_advantages: &[f64],
    lambda: f64,
    cfg: &ShapingConfig,
    shaped: bool,
) -> Result<Vec<ShapedAdvantage>> {
    let mut out: Vec<ShapedAdvantage> = token_advantages
        .iter()
        .enumerate()
        .map(|(i, &a)| ShapedAdvantage::neutral(i, a))
        .collect();
    if !shaped {
        return Ok(out);
    }
    if gaps.len() != segments.len() {
        return Err(Error::Consistency(alloc::format!(
            "{} gap lists for {} segments",
            gaps.len(),
            segments.len()
        )));
    }
    let mut seen = vec![false; token_advantages.len()];
    let mut mods: Vec<Vec<f64>> = Vec::with_capacity(segments.len());
    let mut raws: Vec<Vec<f64>> = Vec::with_capacity(segments.len());
    for (seg, g) in segments.iter().zip(gaps) {
        let idx: Vec<usize> = seg.included_indices().collect();
        if idx.len() != g.len() || idx.iter().zip(g).any(|(&i, r)| i != r.index) {
            return Err(Error::Consistency(alloc::format!(
                "gaps do not cover the included tokens of step {}",
                seg.step_index
            )));
        }
        let mut raw = Vec::with_capacity(g.len());
        for r in g {
            if r.index >= token_advantages.len() || seen[r.index] {
                return Err(Error::Consistency(alloc::format!("token {} out of range or repeated", r.index)));
            }
            seen[r.index] = true;
            if !r.delta.is_finite() {
                return Err(Error::NonFinite("delta"));
            }
            raw.push(raw_weight(sign(token_advantages[r.index]), r.delta));
        }
        mods.push(raw.iter().map(|w| w - 1.0).collect());
        raws.push(raw);
    }
    let mods = match cfg.normalization {
        Normalization::EqualStepMeanAbs => normalize_equal_step(&mods),
        Normalization::None => mods,
    };
    for ((g, raw), m) in gaps.iter().zip(&raws).zip(&mods) {
        for ((r, &w_raw), &mi) in g.iter().zip(raw).zip(m) {
            let unclipped = 1.0 + mi;
            let w_final = clip_weight(unclipped, cfg.alpha_clip);
            let a_base = token_advantages[r.index];
            let (psi, a_shaped) = mix_advantage(a_base, w_final, lambda);
            out[r.index] = ShapedAdvantage {
                index: r.index,
                a_base,
                delta: Some(r.delta),
                w_raw,
                w_final,
                psi,
                a_shaped,
                clipped: w_final != unclipped,
            };
        }
    }
    Ok(out)
}
