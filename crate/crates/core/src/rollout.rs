//! Grammar-constrained episodes under the toy policy.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{masked_log_probs, PolicyInput, PolicyParams};
use crate::rng::stream;
use crate::trajectory::{Role, RolloutGroup, TokenRecord, Trajectory};
use crate::vocab::{ContextToken, TokenId};

/// Runs one episode, asking `choose(turn, turn_prefix, allowed, logprobs)`
/// for every token with more than one admissible choice.
fn run_episode<E, F>(env: &E, params: &PolicyParams, task_seed: u64, id: String, mut choose: F) -> Result<Trajectory>
where
    E: Environment,
    F: FnMut(u32, &[TokenId], &[TokenId], &[f64]) -> Result<TokenId>,
{
    let vocab = env.vocab();
    let (mut state, obs) = env.reset(task_seed);
    let mut context: Vec<ContextToken> = Vec::new();
    let mut tokens: Vec<TokenRecord> = Vec::new();
    let push_obs = |ids: &[TokenId], turn: u32, context: &mut Vec<ContextToken>, tokens: &mut Vec<TokenRecord>| {
        for &id in ids {
            context.push(ContextToken {
                id,
                role: Role::Observation,
                turn,
            });
            tokens.push(TokenRecord::new(vocab.word(id), Role::Observation, 0.0, turn));
        }
    };
    push_obs(&obs, 0, &mut context, &mut tokens);
    let mut reward = 0.0;
    let mut invalid = 0u32;
    while !env.is_done(&state) && env.turn(&state) < env.max_turns() {
        let turn = env.turn(&state);
        let mut prefix: Vec<TokenId> = Vec::new();
        loop {
            let allowed = env.allowed_next(&prefix);
            if allowed.is_empty() {
                break;
            }
            let (tok, lp) = if allowed.len() == 1 {
                (allowed[0], 0.0)
            } else {
                let lps = masked_log_probs(params, PolicyInput { context: &context, turn }, allowed);
                let tok = choose(turn, &prefix, allowed, &lps)?;
                let pos = allowed
                    .iter()
                    .position(|&t| t == tok)
                    .ok_or_else(|| Error::Consistency(format!("`{}` not admissible here", vocab.word(tok))))?;
                (tok, lps[pos])
            };
            let role = env.role_of(&prefix, tok);
            context.push(ContextToken { id: tok, role, turn });
            tokens.push(TokenRecord::new(vocab.word(tok), role, lp, turn));
            prefix.push(tok);
        }
        let out = env.step(&state, &prefix);
        invalid += out.invalid as u32;
        reward = out.reward;
        state = out.state;
        push_obs(&out.observation, turn + 1, &mut context, &mut tokens);
    }
    let success = env.is_success(&state);
    if !success {
        reward = 0.0;
    }
    Ok(Trajectory {
        id,
        reward,
        success,
        invalid_action_count: invalid,
        tokens,
    })
}

/// Samples one episode from `params`, drawing from `rng`.
pub fn sample_trajectory<E: Environment, R: Rng>(
    env: &E,
    params: &PolicyParams,
    task_seed: u64,
    rng: &mut R,
    id: String,
) -> Result<Trajectory> {
    run_episode(env, params, task_seed, id, |_, _, allowed, lps| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (t, lp) in allowed.iter().zip(lps) {
            acc += libm::exp(*lp);
            if u < acc {
                return Ok(*t);
            }
        }
        Ok(*allowed.last().expect("non-empty allowed set"))
    })
}

/// Replays fixed turns under `params`, recording their log-probabilities.
/// Turns past the end of `turns` are filled by the environment expert.
pub fn scripted_trajectory<E: Environment>(
    env: &E,
    params: &PolicyParams,
    task_seed: u64,
    turns: &[Vec<TokenId>],
    id: &str,
) -> Result<Trajectory> {
    run_episode(env, params, task_seed, id.into(), |turn, prefix, _, _| {
        turns
            .get(turn as usize)
            .and_then(|t| t.get(prefix.len()))
            .copied()
            .ok_or_else(|| Error::Consistency(format!("script has no token for turn {turn} position {}", prefix.len())))
    })
}

/// Group of `size` episodes on one task; member `i` samples from the stream
/// keyed by `(run_seed, group_key, i)`.
pub fn rollout_group<E: Environment>(
    env: &E,
    params: &PolicyParams,
    run_seed: u64,
    group_key: u64,
    task_seed: u64,
    size: usize,
) -> Result<RolloutGroup> {
    if size < 2 {
        return Err(Error::Config(format!("group size must be >= 2, got {size}")));
    }
    let (_, obs) = env.reset(task_seed);
    let members = (0..size)
        .map(|i| {
            let mut rng = stream(&[run_seed, group_key, i as u64]);
            sample_trajectory(env, params, task_seed, &mut rng, format!("g{group_key}-m{i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        group_id: format!("g{group_key}"),
        prompt: env.render(&obs),
        members,
    })
}
