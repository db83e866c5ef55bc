//! Windowed gap statistics and Monte-Carlo / gradient verifiers.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::grpo::{per_token_gradients, surrogate_gradient, UpdateItem};
use crate::policy::{PolicyParams, SparseGrad};
use crate::rng::stream;
use crate::shaping::{clip_weight, mix_advantage, raw_weight, sign};
use crate::trajectory::Trajectory;

/// Minimum sample count for the Monte-Carlo verifiers.
pub const MIN_SAMPLES: usize = 10_000;

const SIGN_KEY: u64 = 0x51_6e;
const VARIANCE_KEY: u64 = 0x7a_12;

/// Streaming count / mean / sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl DeltaSummary {
    pub fn from_values(xs: &[f64]) -> Self {
        let mut s = Self::default();
        for &x in xs {
            s.push(x);
        }
        s
    }

    /// From a population mean and std over `count` values.
    pub fn from_moments(count: u64, mean: f64, std: f64) -> Self {
        Self {
            count,
            mean,
            m2: std * std * count as f64,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Pairwise (Chan et al.) combination.
    pub fn merge(&mut self, other: &DeltaSummary) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += d * nb / n;
        self.m2 += other.m2 + d * d * na * nb / n;
        self.count += other.count;
    }

    pub fn std(&self) -> Option<f64> {
        (self.count > 0).then(|| libm::sqrt((self.m2 / self.count as f64).max(0.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub start: u64,
    /// Exclusive; `None` for the open last window.
    pub end: Option<u64>,
    pub count: u64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub empty: bool,
}

/// Per-window Δ statistics over `[b_i, b_{i+1})` and `[b_last, ∞)`.
/// Steps before the first boundary are ignored.
pub fn diag_std_delta(per_step: &[(u64, DeltaSummary)], boundaries: &[u64]) -> Result<Vec<WindowStat>> {
    if boundaries.is_empty() {
        return Err(Error::Config("at least one window boundary is required".into()));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("window boundaries must be strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(boundaries.len());
    for (i, &start) in boundaries.iter().enumerate() {
        let end = boundaries.get(i + 1).copied();
        let mut acc = DeltaSummary::default();
        for (step, s) in per_step {
            if *step >= start && end.is_none_or(|e| *step < e) {
                acc.merge(s);
            }
        }
        out.push(WindowStat {
            start,
            end,
            count: acc.count,
            mean: (acc.count > 0).then_some(acc.mean),
            std: acc.std(),
            empty: acc.count == 0,
        });
    }
    Ok(out)
}

/// One sampled shaping case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignCase {
    pub a: f64,
    pub delta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub psi: f64,
    pub a_shaped: f64,
}

/// Single-token shaping (normalization is the identity on one step).
pub fn shape_single(a: f64, delta: f64, lambda: f64, alpha: f64) -> SignCase {
    let w = clip_weight(raw_weight(sign(a), delta), alpha);
    let (psi, a_shaped) = mix_advantage(a, w, lambda);
    SignCase {
        a,
        delta,
        lambda,
        alpha,
        psi,
        a_shaped,
    }
}

/// Rounding slack on the `1 − λα` lower bound itself.
pub const PSI_BOUND_SLACK: f64 = 1e-12;

pub fn check_sign_case(c: &SignCase) -> bool {
    c.psi > 0.0 && c.psi >= 1.0 - c.lambda * c.alpha - PSI_BOUND_SLACK && sign(c.a_shaped) == sign(c.a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignReport {
    pub cases: usize,
    pub violations: usize,
    pub min_psi: f64,
    pub counterexample: Option<SignCase>,
    pub passed: bool,
}

/// Samples `A ∈ [−10, 10]` (every 64th exactly 0), `Δ ∈ [−30, 30]`,
/// `λ ∈ [0, 1)`, `α ∈ (0, 1)` and checks every case.
pub fn verify_sign_preservation(n: usize, seed: u64) -> Result<SignReport> {
    if n < MIN_SAMPLES {
        return Err(Error::Config(alloc::format!("need at least {MIN_SAMPLES} cases, got {n}")));
    }
    let mut rng = stream(&[seed, SIGN_KEY]);
    let mut violations = 0;
    let mut min_psi = f64::INFINITY;
    let mut counterexample = None;
    for i in 0..n {
        let a = if i % 64 == 0 { 0.0 } else { rng.random_range(-10.0..10.0) };
        let delta = rng.random_range(-30.0..=30.0);
        let lambda = rng.random_range(0.0..1.0);
        let alpha = loop {
            let x: f64 = rng.random_range(0.0..1.0);
            if x > 0.0 {
                break x;
            }
        };
        let c = shape_single(a, delta, lambda, alpha);
        min_psi = min_psi.min(c.psi);
        if !check_sign_case(&c) {
            violations += 1;
            counterexample.get_or_insert(c);
        }
    }
    Ok(SignReport {
        cases: n,
        violations,
        min_psi,
        counterexample,
        passed: violations == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceTestConfig {
    pub n: usize,
    /// Oracle advantage `A* ~ N(oracle_mean, oracle_std²)`.
    pub oracle_mean: f64,
    pub oracle_std: f64,
    /// Noise `ε ~ N(0, σ²)`; observed `A = A* + ε`.
    pub sigma: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// `Δ = fidelity · A*`.
    pub fidelity: f64,
    pub seed: u64,
}

impl Default for VarianceTestConfig {
    fn default() -> Self {
        Self {
            n: 100_000,
            oracle_mean: 0.0,
            oracle_std: 1.0,
            sigma: 1.0,
            lambda: 0.5,
            alpha: 0.9,
            fidelity: 1.0,
            seed: 20_240_601,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n: usize,
    pub var_a: f64,
    pub var_shaped: f64,
    /// `Var(Ψ·A) / Var(A)`.
    pub ratio: f64,
    /// Share of samples with `sign(A) ≠ sign(A*)`.
    pub contradiction_fraction: f64,
    /// `E[Ψ² | sign(A) ≠ sign(A*)]`; absent without contradictions.
    pub mean_psi_sq_contradiction: Option<f64>,
    /// `E[Ψ² | sign(A) = sign(A*)]`.
    pub mean_psi_sq_agreement: Option<f64>,
    pub passed: bool,
}

fn population_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Monte-Carlo comparison of `Var(Ψ·A)` against `Var(A)`; passes iff the
/// shaped variance is strictly smaller.
pub fn verify_variance_bound(cfg: &VarianceTestConfig) -> Result<VarianceReport> {
    if cfg.n < MIN_SAMPLES {
        return Err(Error::Config(alloc::format!("need at least {MIN_SAMPLES} samples, got {}", cfg.n)));
    }
    if !(0.0..1.0).contains(&cfg.lambda) || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config("lambda must be in [0, 1) and alpha in (0, 1)".into()));
    }
    let oracle = Normal::new(cfg.oracle_mean, cfg.oracle_std)
        .map_err(|_| Error::Config("oracle_std must be finite and >= 0".into()))?;
    let noise = Normal::new(0.0, cfg.sigma).map_err(|_| Error::Config("sigma must be finite and >= 0".into()))?;
    let mut rng = stream(&[cfg.seed, VARIANCE_KEY]);
    let mut a_all = Vec::with_capacity(cfg.n);
    let mut shaped = Vec::with_capacity(cfg.n);
    let (mut contra, mut agree) = (DeltaSummary::default(), DeltaSummary::default());
    for _ in 0..cfg.n {
        let a_star = oracle.sample(&mut rng);
        let a = a_star + noise.sample(&mut rng);
        let c = shape_single(a, cfg.fidelity * a_star, cfg.lambda, cfg.alpha);
        let psi_sq = c.psi * c.psi;
        if sign(a) != sign(a_star) {
            contra.push(psi_sq);
        } else {
            agree.push(psi_sq);
        }
        a_all.push(a);
        shaped.push(c.a_shaped);
    }
    let var_a = population_var(&a_all);
    let var_shaped = population_var(&shaped);
    Ok(VarianceReport {
        n: cfg.n,
        var_a,
        var_shaped,
        ratio: var_shaped / var_a,
        contradiction_fraction: contra.count as f64 / cfg.n as f64,
        mean_psi_sq_contradiction: (contra.count > 0).then_some(contra.mean),
        mean_psi_sq_agreement: (agree.count > 0).then_some(agree.mean),
        passed: var_shaped < var_a,
    })
}

/// `a·b / sqrt(|a|²|b|²)`; `None` when either norm is zero.
pub fn cosine(a: &SparseGrad, b: &SparseGrad) -> Option<f64> {
    let aa = a.dot(a);
    let bb = b.dot(b);
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some(a.dot(b) / libm::sqrt(aa * bb))
}

/// Relative tolerance for the per-token proportionality check.
pub const PROPORTIONALITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Batch cosine between unshaped and shaped gradients; `None` on a zero norm.
    pub cosine: Option<f64>,
    pub tokens_checked: u64,
    /// Largest `|g_shaped − Ψ·g_base| / max(|Ψ·g_base|, tiny)` over entries.
    pub max_rel_err: f64,
    pub proportional: bool,
}

/// Compares per-token and batch gradients under base advantages `base` and
/// shaped advantages `base ⊙ psi`.
pub fn measure_gradient_alignment<E: Environment>(
    params: &PolicyParams,
    env: &E,
    trajectories: &[&Trajectory],
    base: &[Vec<f64>],
    psi: &[Vec<f64>],
) -> Result<AlignmentReport> {
    if trajectories.len() != base.len() || base.len() != psi.len() {
        return Err(Error::Consistency("batch components differ in length".into()));
    }
    let shaped: Vec<Vec<f64>> = base
        .iter()
        .zip(psi)
        .map(|(b, p)| b.iter().zip(p).map(|(x, y)| x * y).collect())
        .collect();
    let base_items: Vec<UpdateItem<'_>> = trajectories
        .iter()
        .zip(base)
        .map(|(t, a)| UpdateItem { trajectory: t, advantages: a })
        .collect();
    let shaped_items: Vec<UpdateItem<'_>> = trajectories
        .iter()
        .zip(&shaped)
        .map(|(t, a)| UpdateItem { trajectory: t, advantages: a })
        .collect();
    let mut tokens = 0u64;
    let mut max_rel = 0.0f64;
    for ((bi, si), p) in base_items.iter().zip(&shaped_items).zip(psi) {
        let gb = per_token_gradients(params, env, *bi)?;
        let gs = per_token_gradients(params, env, *si)?;
        for ((ib, b), (is, s)) in gb.iter().zip(&gs) {
            if ib != is {
                return Err(Error::Consistency("token order differs between passes".into()));
            }
            tokens += 1;
            for (r, row_b) in &b.rows {
                let row_s = s.rows.get(r).ok_or_else(|| Error::Consistency("missing gradient row".into()))?;
                for (x, y) in row_b.iter().zip(row_s) {
                    let expect = p[*ib] * x;
                    let err = (y - expect).abs();
                    if err > 0.0 {
                        max_rel = max_rel.max(err / expect.abs().max(f64::MIN_POSITIVE));
                    }
                }
            }
        }
    }
    let g_base = surrogate_gradient(params, env, &base_items, 0.0, params)?;
    let g_shaped = surrogate_gradient(params, env, &shaped_items, 0.0, params)?;
    Ok(AlignmentReport {
        cosine: cosine(&g_base.grad, &g_shaped.grad),
        tokens_checked: tokens,
        max_rel_err: max_rel,
        proportional: max_rel <= PROPORTIONALITY_TOL,
    })
}
