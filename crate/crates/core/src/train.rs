//! Per-step training pipeline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diag::{cosine, measure_gradient_alignment, AlignmentReport};
use crate::env::{factchain, latch, EnvKind, Environment, FactChain, LatchWorld};
use crate::error::{Error, Result};
use crate::extract::{extract_steps, ExtractionMode};
use crate::grpo::{
    apply_reward_penalties, broadcast_token_advantages, group_advantage, policy_update, surrogate_gradient,
    UpdateItem, UpdateReport,
};
use crate::policy::{PolicyParams, DEFAULT_COPY_BIAS, DEFAULT_DIM, DEFAULT_HASH_SEED};
use crate::rescore::{score_step, GapRecord, GrammarScorer, StudentSource};
use crate::rng::derive_seed;
use crate::rollout::{rollout_group, scripted_trajectory};
use crate::shaping::{lambda_schedule, shape_trajectory, ShapedAdvantage, ShapingConfig};
use crate::teacher::{build_contexts_encoded, maybe_refresh, select_peer, TeacherSnapshot};
use crate::trajectory::{RolloutGroup, Trajectory};
use crate::vocab::TokenId;

const TASK_KEY: u64 = 0x7a5c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub group_size: usize,
    pub batch_tasks: usize,
    pub steps: u64,
    pub shaping: ShapingConfig,
    /// When false the update uses base advantages; Δ diagnostics still run.
    pub shaping_enabled: bool,
    /// Defaults to `action_only` for LatchWorld and `clean_step_no_observation` for FactChain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionMode>,
    pub lr: f64,
    pub kl_coeff: f64,
    pub invalid_penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_turns: Option<u32>,
    pub kb_size: usize,
    pub policy_dim: usize,
    pub hash_seed: u64,
    pub copy_bias: f64,
    /// Behavior-cloning passes over expert episodes before step 0.
    pub warm_start_epochs: u32,
    pub warm_start_lr: f64,
    /// Task seeds `0..warm_start_tasks` used for the warm start.
    pub warm_start_tasks: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::LatchWorld,
            seed: 1,
            group_size: 8,
            batch_tasks: 8,
            steps: 150,
            shaping: ShapingConfig::default(),
            shaping_enabled: true,
            extraction: None,
            lr: 0.1,
            kl_coeff: 0.01,
            invalid_penalty: 0.1,
            max_turns: None,
            kb_size: factchain::DEFAULT_KB_SIZE,
            policy_dim: DEFAULT_DIM,
            hash_seed: DEFAULT_HASH_SEED,
            copy_bias: DEFAULT_COPY_BIAS,
            warm_start_epochs: 20,
            warm_start_lr: 0.1,
            warm_start_tasks: 12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.shaping.validate()?;
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if self.batch_tasks == 0 {
            return Err(Error::Config("batch_tasks must be >= 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("kl_coeff", self.kl_coeff),
            ("invalid_penalty", self.invalid_penalty),
            ("warm_start_lr", self.warm_start_lr),
            ("copy_bias", self.copy_bias),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.max_turns == Some(0) {
            return Err(Error::Config("max_turns must be >= 1".into()));
        }
        if self.env == EnvKind::FactChain && !(1..=factchain::DEFAULT_KB_SIZE).contains(&self.kb_size) {
            return Err(Error::Config(format!(
                "kb_size must be in 1..={}, got {}",
                factchain::DEFAULT_KB_SIZE,
                self.kb_size
            )));
        }
        Ok(())
    }

    pub fn extraction_mode(&self) -> ExtractionMode {
        self.extraction.unwrap_or(match self.env {
            EnvKind::LatchWorld => ExtractionMode::ActionOnly,
            EnvKind::FactChain => ExtractionMode::CleanStepNoObservation,
        })
    }

    pub fn latchworld(&self) -> LatchWorld {
        LatchWorld::new(self.max_turns.unwrap_or(latch::DEFAULT_MAX_TURNS))
    }

    pub fn factchain(&self) -> FactChain {
        FactChain::new(
            self.kb_size,
            self.max_turns.unwrap_or(factchain::DEFAULT_MAX_TURNS),
            factchain::DEFAULT_KB_SEED,
        )
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub lambda: f64,
    /// Population std of every Δ rescored this step; absent without shaped tokens.
    pub std_delta: Option<f64>,
    pub delta_mean: Option<f64>,
    pub delta_count: u64,
    pub mean_abs_psi_dev: f64,
    pub clip_saturation: f64,
    pub groups_skipped_no_peer: u64,
    pub trajectories_dropped: u64,
    pub mean_traj_len: f64,
    pub invalid_action_rate: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub kl_mean: f64,
    pub tokens_updated: u64,
    /// Cosine between the unshaped and the applied policy gradient (KL excluded).
    pub grad_cosine: Option<f64>,
    pub teacher_step: u64,
    pub teacher_refreshed: bool,
}

/// Everything a step produced, for persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub metrics: MetricsRecord,
    pub groups: Vec<RolloutGroup>,
    /// `shaped[g][m]`: per-token records of member `m` of group `g`.
    pub shaped: Vec<Vec<Vec<ShapedAdvantage>>>,
    /// `advantages[g][m]`: group-relative advantage after penalties.
    pub advantages: Vec<Vec<f64>>,
    /// `dropped_members[g][m]`: rescoring failed numerically.
    pub dropped_members: Vec<Vec<bool>>,
}

/// One step's rollouts and shaping, before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedBatch {
    pub groups: Vec<RolloutGroup>,
    pub shaped: Vec<Vec<Vec<ShapedAdvantage>>>,
    pub advantages: Vec<Vec<f64>>,
    pub dropped_members: Vec<Vec<bool>>,
    /// Unshaped token advantages, members in group order.
    pub base_advs: Vec<Vec<f64>>,
    pub deltas: Vec<f64>,
    /// Tokens that received a Δ.
    pub included: u64,
    pub psi_dev: f64,
    pub clipped: u64,
    pub skipped: u64,
    pub dropped: u64,
}

/// Per-trajectory shaping outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedTrajectory {
    pub records: Vec<ShapedAdvantage>,
    pub gaps: Vec<GapRecord>,
    /// Rescoring failed numerically; shaping was skipped.
    pub dropped: bool,
}

/// Expert turns from `reset(task_seed)` until the episode ends.
pub fn expert_turns<E: Environment>(env: &E, task_seed: u64) -> Vec<Vec<TokenId>> {
    let (mut s, _) = env.reset(task_seed);
    let mut turns = Vec::new();
    while !env.is_done(&s) && env.turn(&s) < env.max_turns() {
        match env.expert_turn(&s) {
            Some(t) => {
                s = env.step(&s, &t).state;
                turns.push(t);
            }
            None => break,
        }
    }
    turns
}

/// Behavior cloning on expert episodes for `tasks`, `epochs` full-batch steps.
pub fn warm_start<E: Environment>(
    params: &mut PolicyParams,
    env: &E,
    tasks: core::ops::Range<u64>,
    epochs: u32,
    lr: f64,
) -> Result<()> {
    for _ in 0..epochs {
        let trajs = tasks
            .clone()
            .map(|seed| scripted_trajectory(env, params, seed, &expert_turns(env, seed), "expert"))
            .collect::<Result<Vec<Trajectory>>>()?;
        let advs: Vec<Vec<f64>> = trajs.iter().map(|t| broadcast_token_advantages(t, 1.0)).collect();
        let items: Vec<UpdateItem<'_>> = trajs
            .iter()
            .zip(&advs)
            .map(|(trajectory, advantages)| UpdateItem { trajectory, advantages })
            .collect();
        let reference = params.clone();
        policy_update(params, env, &items, lr, 0.0, &reference, 0)?;
    }
    Ok(())
}

/// Rescoring and shaping for one member. `peer` is the group's first
/// successful member, if any.
#[allow(clippy::too_many_arguments)]
pub fn shape_member<E: Environment>(
    env: &E,
    traj: &Trajectory,
    peer: Option<&Trajectory>,
    mode: ExtractionMode,
    teacher: &PolicyParams,
    student: StudentSource<'_, PolicyParams>,
    token_advantages: &[f64],
    lambda: f64,
    cfg: &ShapingConfig,
) -> Result<ShapedTrajectory> {
    let vocab = env.vocab();
    let segments = extract_steps(traj, mode)?;
    let shaped = !traj.success && peer.is_some();
    let mut per_step = Vec::with_capacity(segments.len());
    let mut dropped = false;
    if shaped {
        let encoded = vocab.encode(traj)?;
        let scorer = GrammarScorer::new(env);
        for seg in &segments {
            let ctx = build_contexts_encoded(vocab, false, encoded[..seg.span.start].to_vec(), peer)?;
            match score_step(&scorer, teacher, student, &ctx, traj, &encoded, seg) {
                Ok(g) => per_step.push(g),
                Err(Error::NonFinite(_)) => {
                    dropped = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let active = shaped && !dropped;
    if !active {
        per_step.clear();
    }
    let records = shape_trajectory(&segments, &per_step, token_advantages, lambda, cfg, active)?;
    Ok(ShapedTrajectory {
        records,
        gaps: per_step.into_iter().flatten().collect(),
        dropped,
    })
}

/// Population mean and std.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, libm::sqrt(var)))
}

pub struct Trainer<E: Environment> {
    env: E,
    cfg: TrainConfig,
    params: PolicyParams,
    teacher: TeacherSnapshot,
    step: u64,
}

impl<E: Environment> Trainer<E> {
    /// Builds the policy, runs the warm start, snapshots the teacher at step 0.
    pub fn new(env: E, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if env.kind() != cfg.env {
            return Err(Error::Config(format!(
                "config is for {} but the environment is {}",
                cfg.env.as_str(),
                env.kind().as_str()
            )));
        }
        let mut params = PolicyParams::zeros(env.vocab(), cfg.policy_dim, cfg.hash_seed, cfg.copy_bias)?;
        warm_start(&mut params, &env, 0..cfg.warm_start_tasks, cfg.warm_start_epochs, cfg.warm_start_lr)?;
        let teacher = TeacherSnapshot::take(&params, 0);
        Ok(Self {
            env,
            cfg,
            params,
            teacher,
            step: 0,
        })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn teacher(&self) -> &TeacherSnapshot {
        &self.teacher
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Task seed of group `b` at step `t`.
    pub fn task_seed(&self, t: u64, b: u64) -> u64 {
        derive_seed(&[self.cfg.seed, TASK_KEY, t, b])
    }

    /// Rollouts of step `t` under the current policy, with group advantages
    /// and shaping records at `lambda`.
    pub fn rollout_and_shape(&self, t: u64, teacher: &TeacherSnapshot, lambda: f64) -> Result<ShapedBatch> {
        let cfg = &self.cfg;
        let mode = cfg.extraction_mode();
        let mut groups = Vec::with_capacity(cfg.batch_tasks);
        for b in 0..cfg.batch_tasks as u64 {
            let key = t * cfg.batch_tasks as u64 + b;
            groups.push(rollout_group(
                &self.env,
                &self.params,
                cfg.seed,
                key,
                self.task_seed(t, b),
                cfg.group_size,
            )?);
        }

        let mut shaped = Vec::with_capacity(groups.len());
        let mut base_advs: Vec<Vec<f64>> = Vec::new();
        let mut advantages = Vec::with_capacity(groups.len());
        let mut dropped_members = Vec::with_capacity(groups.len());
        let mut deltas: Vec<f64> = Vec::new();
        let (mut included, mut psi_dev, mut clipped) = (0u64, 0.0, 0u64);
        let (mut skipped, mut dropped) = (0u64, 0u64);
        for g in &groups {
            let rewards: Vec<f64> = g
                .members
                .iter()
                .map(|m| apply_reward_penalties(m, cfg.invalid_penalty))
                .collect();
            let adv = group_advantage(&rewards)?;
            let peer = select_peer(g).map(|i| &g.members[i]);
            if peer.is_none() {
                skipped += 1;
            }
            let mut shaped_g = Vec::with_capacity(g.members.len());
            let mut dropped_g = Vec::with_capacity(g.members.len());
            for (m, &a) in g.members.iter().zip(&adv) {
                let base = broadcast_token_advantages(m, a);
                let s = shape_member(
                    &self.env,
                    m,
                    peer,
                    mode,
                    &teacher.params,
                    StudentSource::Params(&self.params),
                    &base,
                    lambda,
                    &cfg.shaping,
                )?;
                dropped += s.dropped as u64;
                dropped_g.push(s.dropped);
                deltas.extend(s.gaps.iter().map(|r| r.delta));
                for r in s.records.iter().filter(|r| r.delta.is_some()) {
                    included += 1;
                    psi_dev += (r.psi - 1.0).abs();
                    clipped += r.clipped as u64;
                }
                base_advs.push(base);
                shaped_g.push(s.records);
            }
            shaped.push(shaped_g);
            advantages.push(adv);
            dropped_members.push(dropped_g);
        }

        Ok(ShapedBatch {
            groups,
            shaped,
            advantages,
            dropped_members,
            base_advs,
            deltas,
            included,
            psi_dev,
            clipped,
            skipped,
            dropped,
        })
    }

    /// Gradient alignment on the current step's batch without updating:
    /// base advantages against shaped ones at `lambda`, teacher as is.
    pub fn alignment_probe(&self, lambda: f64) -> Result<AlignmentReport> {
        let b = self.rollout_and_shape(self.step, &self.teacher, lambda)?;
        let members: Vec<&Trajectory> = b.groups.iter().flat_map(|g| g.members.iter()).collect();
        let psi: Vec<Vec<f64>> = b
            .shaped
            .iter()
            .flatten()
            .map(|rs| rs.iter().map(|r| r.psi).collect())
            .collect();
        measure_gradient_alignment(&self.params, &self.env, &members, &b.base_advs, &psi)
    }

    /// Runs one full step. On error the policy is left as it was.
    pub fn step(&mut self) -> Result<StepOutput> {
        let t = self.step;
        let cfg = &self.cfg;
        let interval = cfg.shaping.teacher_refresh_interval;
        let refreshed = t % interval == 0;
        let teacher = maybe_refresh(self.teacher.clone(), &self.params, t, interval)?;
        let lambda = if cfg.shaping_enabled {
            lambda_schedule(t, &cfg.shaping)
        } else {
            0.0
        };
        let ShapedBatch {
            groups,
            shaped: shaped_all,
            advantages,
            dropped_members,
            base_advs,
            deltas,
            included,
            psi_dev,
            clipped,
            skipped,
            dropped,
        } = self.rollout_and_shape(t, &teacher, lambda)?;

        let members: Vec<&Trajectory> = groups.iter().flat_map(|g| g.members.iter()).collect();
        let applied: Vec<Vec<f64>> = if cfg.shaping_enabled {
            shaped_all
                .iter()
                .flatten()
                .map(|rs| rs.iter().map(|r| r.a_shaped).collect())
                .collect()
        } else {
            base_advs.clone()
        };
        let base_items: Vec<UpdateItem<'_>> = members
            .iter()
            .zip(&base_advs)
            .map(|(trajectory, advantages)| UpdateItem { trajectory, advantages })
            .collect();
        let applied_items: Vec<UpdateItem<'_>> = members
            .iter()
            .zip(&applied)
            .map(|(trajectory, advantages)| UpdateItem { trajectory, advantages })
            .collect();
        let g_base = surrogate_gradient(&self.params, &self.env, &base_items, 0.0, &teacher.params)?;
        let g_applied = surrogate_gradient(&self.params, &self.env, &applied_items, 0.0, &teacher.params)?;
        let grad_cosine = cosine(&g_base.grad, &g_applied.grad);

        let mut next = self.params.clone();
        let report: UpdateReport =
            policy_update(&mut next, &self.env, &applied_items, cfg.lr, cfg.kl_coeff, &teacher.params, t)?;

        let n = members.len() as f64;
        let successes = members.iter().filter(|m| m.success).count() as f64;
        let turns: u64 = members.iter().map(|m| policy_turns(m)).sum();
        let invalid: u64 = members.iter().map(|m| m.invalid_action_count as u64).sum();
        let stats = mean_std(&deltas);
        let metrics = MetricsRecord {
            step: t,
            success_rate: successes / n,
            mean_reward: members.iter().map(|m| m.reward).sum::<f64>() / n,
            lambda,
            std_delta: stats.map(|s| s.1),
            delta_mean: stats.map(|s| s.0),
            delta_count: deltas.len() as u64,
            mean_abs_psi_dev: if included > 0 { psi_dev / included as f64 } else { 0.0 },
            clip_saturation: if included > 0 { clipped as f64 / included as f64 } else { 0.0 },
            groups_skipped_no_peer: skipped,
            trajectories_dropped: dropped,
            mean_traj_len: members.iter().map(|m| m.len() as f64).sum::<f64>() / n,
            invalid_action_rate: if turns > 0 { invalid as f64 / turns as f64 } else { 0.0 },
            loss: report.mean_loss,
            grad_norm: report.grad_norm,
            kl_mean: report.kl_mean,
            tokens_updated: report.tokens_updated,
            grad_cosine,
            teacher_step: teacher.taken_at_step,
            teacher_refreshed: refreshed,
        };

        self.params = next;
        self.teacher = teacher;
        self.step += 1;
        Ok(StepOutput {
            metrics,
            groups,
            shaped: shaped_all,
            advantages,
            dropped_members,
        })
    }

    /// Runs the remaining steps, handing each output to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&Self, &StepOutput) -> Result<()>,
    {
        while !self.is_finished() {
            let out = self.step()?;
            sink(self, &out)?;
        }
        Ok(())
    }
}

fn policy_turns(t: &Trajectory) -> u64 {
    let mut turns: Vec<u32> = t
        .tokens
        .iter()
        .filter(|x| x.role.is_policy())
        .map(|x| x.turn_index)
        .collect();
    turns.dedup();
    turns.len() as u64
}

/// Runs a full configuration in memory and returns its metrics.
pub fn run_metrics(cfg: &TrainConfig) -> Result<(Vec<MetricsRecord>, PolicyParams)> {
    fn go<E: Environment>(env: E, cfg: &TrainConfig) -> Result<(Vec<MetricsRecord>, PolicyParams)> {
        let mut tr = Trainer::new(env, cfg.clone())?;
        let mut out = vec![];
        tr.run(|_, s| {
            out.push(s.metrics.clone());
            Ok(())
        })?;
        Ok((out, tr.params().clone()))
    }
    match cfg.env {
        EnvKind::LatchWorld => go(cfg.latchworld(), cfg),
        EnvKind::FactChain => go(cfg.factchain(), cfg),
    }
}
