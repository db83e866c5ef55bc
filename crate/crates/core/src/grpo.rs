//! Group-relative advantages, KL regularization and the policy update.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::{turn_prefix, Environment};
use crate::error::{Error, Result};
use crate::policy::{accumulate_grad, masked_log_probs, PolicyInput, PolicyParams, SparseGrad};
use crate::trajectory::Trajectory;
use crate::vocab::{ContextToken, TokenId};

/// Standard-deviation guard in group normalization.
pub const STD_EPS: f64 = 1e-8;

/// `reward − coeff · invalid_action_count`.
pub fn apply_reward_penalties(traj: &Trajectory, invalid_coeff: f64) -> f64 {
    traj.reward - invalid_coeff * traj.invalid_action_count as f64
}

/// `(R_i − mean) / (std + ε)` with the population std; zeros when std ≤ ε.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(alloc::format!(
            "group advantage needs at least 2 members, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std <= STD_EPS {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + STD_EPS)).collect())
}

/// `a` on every policy-emitted token, 0 on observations.
pub fn broadcast_token_advantages(traj: &Trajectory, a: f64) -> Vec<f64> {
    traj.tokens
        .iter()
        .map(|t| if t.role.is_policy() { a } else { 0.0 })
        .collect()
}

/// k3 estimator `exp(δ) − δ − 1`, `δ = logp_ref − logp_policy`.
pub fn kl_token_penalty(logp_policy: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_policy;
    libm::expm1(d) - d
}

/// One trajectory and its per-token (shaped) advantages.
#[derive(Debug, Clone, Copy)]
pub struct UpdateItem<'a> {
    pub trajectory: &'a Trajectory,
    pub advantages: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub step: u64,
    pub mean_loss: f64,
    pub grad_norm: f64,
    pub kl_mean: f64,
    pub tokens_updated: u64,
}

/// Ascent direction of the surrogate plus its summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub grad: SparseGrad,
    /// Negated surrogate, averaged over trajectories.
    pub loss: f64,
    pub kl_mean: f64,
    pub tokens: u64,
}

/// A sampled decision: a policy token with more than one admissible choice.
struct Decision<'a> {
    index: usize,
    token: TokenId,
    turn: u32,
    context: &'a [ContextToken],
    allowed: &'a [TokenId],
}

fn decisions<'a, E: Environment>(env: &'a E, traj: &Trajectory, encoded: &'a [ContextToken]) -> Result<Vec<Decision<'a>>> {
    let mut out = Vec::new();
    for (i, tok) in encoded.iter().enumerate() {
        if !tok.role.is_policy() {
            continue;
        }
        let context = &encoded[..i];
        let allowed = env.allowed_next(&turn_prefix(context, tok.turn));
        if !allowed.contains(&tok.id) {
            return Err(Error::Consistency(alloc::format!(
                "trajectory `{}` token {i} is not admitted by the grammar",
                traj.id
            )));
        }
        if allowed.len() > 1 {
            out.push(Decision {
                index: i,
                token: tok.id,
                turn: tok.turn,
                context,
                allowed,
            });
        }
    }
    Ok(out)
}

fn check_item(item: &UpdateItem<'_>) -> Result<()> {
    if item.advantages.len() != item.trajectory.len() {
        return Err(Error::Consistency(alloc::format!(
            "{} advantages for {} tokens",
            item.advantages.len(),
            item.trajectory.len()
        )));
    }
    if item.advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("advantage"));
    }
    Ok(())
}

/// Gradient of `(1/N) Σ_τ Σ_ℓ [Ã_ℓ log π(z_ℓ) − kl · k3_ℓ]`.
///
/// Forced tokens carry no gradient and are skipped.
pub fn surrogate_gradient<E: Environment>(
    params: &PolicyParams,
    env: &E,
    items: &[UpdateItem<'_>],
    kl_coeff: f64,
    reference: &PolicyParams,
) -> Result<Surrogate> {
    if items.is_empty() {
        return Err(Error::Config("empty update batch".into()));
    }
    let scale = 1.0 / items.len() as f64;
    let mut grad = SparseGrad::new();
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut tokens = 0u64;
    for item in items {
        check_item(item)?;
        let encoded = env.vocab().encode(item.trajectory)?;
        for d in decisions(env, item.trajectory, &encoded)? {
            let input = PolicyInput {
                context: d.context,
                turn: d.turn,
            };
            let pos = d.allowed.iter().position(|&t| t == d.token).unwrap_or(0);
            let ref_lp = masked_log_probs(reference, input, d.allowed)[pos];
            let lp = masked_log_probs(params, input, d.allowed)[pos];
            let delta = ref_lp - lp;
            let a = item.advantages[d.index];
            let coeff = a + kl_coeff * libm::expm1(delta);
            accumulate_grad(params, input, d.token, Some(d.allowed), coeff * scale, &mut grad)?;
            let k3 = kl_token_penalty(lp, ref_lp);
            surrogate += scale * (a * lp - kl_coeff * k3);
            kl_sum += k3;
            tokens += 1;
        }
    }
    Ok(Surrogate {
        grad,
        loss: -surrogate,
        kl_mean: if tokens > 0 { kl_sum / tokens as f64 } else { 0.0 },
        tokens,
    })
}

/// One ascent step of size `lr`. On a non-finite gradient `params` is left
/// untouched and an error is returned.
pub fn policy_update<E: Environment>(
    params: &mut PolicyParams,
    env: &E,
    items: &[UpdateItem<'_>],
    lr: f64,
    kl_coeff: f64,
    reference: &PolicyParams,
    step: u64,
) -> Result<UpdateReport> {
    let s = surrogate_gradient(params, env, items, kl_coeff, reference)?;
    if !s.grad.all_finite() || !s.loss.is_finite() {
        return Err(Error::NonFinite("policy gradient"));
    }
    params.apply(&s.grad, lr);
    Ok(UpdateReport {
        step,
        mean_loss: s.loss,
        grad_norm: s.grad.norm(),
        kl_mean: s.kl_mean,
        tokens_updated: s.tokens,
    })
}

/// `Ã_ℓ ∇ log π(z_ℓ)` for every decision token of one trajectory.
pub fn per_token_gradients<E: Environment>(
    params: &PolicyParams,
    env: &E,
    item: UpdateItem<'_>,
) -> Result<Vec<(usize, SparseGrad)>> {
    check_item(&item)?;
    let encoded = env.vocab().encode(item.trajectory)?;
    decisions(env, item.trajectory, &encoded)?
        .into_iter()
        .map(|d| {
            let mut g = SparseGrad::new();
            let input = PolicyInput {
                context: d.context,
                turn: d.turn,
            };
            accumulate_grad(params, input, d.token, Some(d.allowed), item.advantages[d.index], &mut g)?;
            Ok((d.index, g))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::LatchWorld;
    use crate::rollout::rollout_group;
    use crate::trajectory::{Role, TokenRecord};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn traj(reward: f64, invalid: u32) -> Trajectory {
        Trajectory {
            id: "t".into(),
            reward,
            success: reward == 1.0,
            invalid_action_count: invalid,
            tokens: vec![
                TokenRecord::new("o", Role::Observation, 0.0, 0),
                TokenRecord::new("a", Role::Action, -0.1, 0),
            ],
        }
    }

    #[test]
    fn penalties() {
        assert_eq!(apply_reward_penalties(&traj(1.0, 0), 0.1), 1.0);
        assert!(close(apply_reward_penalties(&traj(1.0, 2), 0.1), 0.8, 1e-15));
        assert!(close(apply_reward_penalties(&traj(0.0, 3), 0.1), -0.3, 1e-15));
    }

    #[test]
    fn advantages() {
        let a = group_advantage(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        for (x, e) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!(close(*x, e, 1e-7));
        }
        assert_eq!(group_advantage(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        let b = group_advantage(&[1.0, 0.0]).unwrap();
        assert!(close(b[0], 1.0, 1e-7) && close(b[1], -1.0, 1e-7));
        assert!(matches!(group_advantage(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn broadcast() {
        let t = traj(1.0, 0);
        assert_eq!(broadcast_token_advantages(&t, 1.5), vec![0.0, 1.5]);
        assert_eq!(broadcast_token_advantages(&t, 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn k3_values() {
        assert_eq!(kl_token_penalty(-1.0, -1.0), 0.0);
        assert!(close(kl_token_penalty(0.0, 0.1), 0.005_170_918_075_647_624, 1e-15));
        assert!(close(kl_token_penalty(0.0, -0.1), 0.004_837_418_035_959_573, 1e-15));
    }

    fn small_params(env: &LatchWorld) -> PolicyParams {
        let mut p = PolicyParams::zeros(env.vocab(), 1 << 8, 5, 1.0).unwrap();
        for (i, w) in p.weights_mut().iter_mut().enumerate() {
            *w = libm::sin(i as f64 * 0.37) * 0.4;
        }
        p
    }

    #[test]
    fn zero_advantages_leave_params_unchanged() {
        let env = LatchWorld::default();
        let mut p = small_params(&env);
        let g = rollout_group(&env, &p, 1, 2, 3, 4).unwrap();
        let zeros: Vec<Vec<f64>> = g.members.iter().map(|m| vec![0.0; m.len()]).collect();
        let items: Vec<UpdateItem<'_>> = g
            .members
            .iter()
            .zip(&zeros)
            .map(|(t, a)| UpdateItem { trajectory: t, advantages: a })
            .collect();
        let before = p.clone();
        let r = policy_update(&mut p, &env, &items, 0.1, 0.0, &before, 0).unwrap();
        assert_eq!(p, before);
        assert_eq!(r.grad_norm, 0.0);
        assert!(r.tokens_updated > 0);
    }

    #[test]
    fn non_finite_advantage_aborts() {
        let env = LatchWorld::default();
        let mut p = small_params(&env);
        let g = rollout_group(&env, &p, 1, 2, 3, 2).unwrap();
        let mut adv = vec![0.0; g.members[0].len()];
        adv[3] = f64::NAN;
        let before = p.clone();
        let items = [UpdateItem { trajectory: &g.members[0], advantages: &adv }];
        assert!(policy_update(&mut p, &env, &items, 0.1, 0.01, &before, 0).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn per_token_contributions_scale_linearly() {
        let env = LatchWorld::default();
        let p = small_params(&env);
        let g = rollout_group(&env, &p, 4, 0, 9, 2).unwrap();
        let t = &g.members[0];
        let base = broadcast_token_advantages(t, 0.7);
        let psi: Vec<f64> = (0..t.len()).map(|i| 0.85 + 0.01 * (i % 30) as f64).collect();
        let shaped: Vec<f64> = base.iter().zip(&psi).map(|(a, s)| a * s).collect();
        let u = per_token_gradients(&p, &env, UpdateItem { trajectory: t, advantages: &base }).unwrap();
        let s = per_token_gradients(&p, &env, UpdateItem { trajectory: t, advantages: &shaped }).unwrap();
        assert_eq!(u.len(), s.len());
        for ((i, gu), (j, gs)) in u.iter().zip(&s) {
            assert_eq!(i, j);
            for (r, row) in &gu.rows {
                for (x, y) in row.iter().zip(&gs.rows[r]) {
                    assert!(close(x * psi[*i], *y, 1e-15 * (1.0 + x.abs())));
                }
            }
        }
    }
}
