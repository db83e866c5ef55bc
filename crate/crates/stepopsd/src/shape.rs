//! Shaped-output schema and offline shaping of rollout files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stepopsd_core::env::{EnvKind, Environment};
use stepopsd_core::grpo::{apply_reward_penalties, broadcast_token_advantages, group_advantage};
use stepopsd_core::rescore::StudentSource;
use stepopsd_core::shaping::{lambda_schedule, ShapedAdvantage};
use stepopsd_core::teacher::select_peer;
use stepopsd_core::train::{shape_member, TrainConfig};
use stepopsd_core::{Role, RolloutGroup, TeacherSnapshot, Trajectory};

use crate::error::{Error, Result};
use crate::jsonl::read_jsonl_file;

/// A token with its shaping record appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedToken {
    pub text: String,
    pub role: Role,
    pub logprob: f64,
    pub turn: u32,
    pub a_base: f64,
    pub delta: Option<f64>,
    pub w_raw: f64,
    pub w_final: f64,
    pub psi: f64,
    pub a_shaped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedMember {
    pub id: String,
    pub reward: f64,
    pub success: bool,
    pub invalid_action_count: u32,
    /// Group-relative advantage after penalties.
    pub advantage: f64,
    /// Rescoring failed numerically; Ψ = 1.
    pub dropped: bool,
    pub tokens: Vec<ShapedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedGroup {
    pub group_id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    pub lambda: f64,
    /// No member succeeded, so nothing was shaped.
    pub skipped_no_peer: bool,
    pub members: Vec<ShapedMember>,
}

pub fn shaped_group(
    group: &RolloutGroup,
    step: Option<u64>,
    lambda: f64,
    advantages: &[f64],
    records: &[Vec<ShapedAdvantage>],
    dropped: &[bool],
) -> ShapedGroup {
    let members = group
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| ShapedMember {
            id: m.id.clone(),
            reward: m.reward,
            success: m.success,
            invalid_action_count: m.invalid_action_count,
            advantage: advantages[i],
            dropped: dropped[i],
            tokens: m
                .tokens
                .iter()
                .zip(&records[i])
                .map(|(t, r)| ShapedToken {
                    text: t.text.clone(),
                    role: t.role,
                    logprob: t.student_logprob,
                    turn: t.turn_index,
                    a_base: r.a_base,
                    delta: r.delta,
                    w_raw: r.w_raw,
                    w_final: r.w_final,
                    psi: r.psi,
                    a_shaped: r.a_shaped,
                })
                .collect(),
        })
        .collect();
    ShapedGroup {
        group_id: group.group_id.clone(),
        prompt: group.prompt.clone(),
        step,
        lambda,
        skipped_no_peer: select_peer(group).is_none(),
        members,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub groups: u64,
    pub members: u64,
    pub skipped_no_peer: u64,
    pub dropped: u64,
    pub shaped_tokens: u64,
}

fn validate_group(line: usize, g: &RolloutGroup) -> Result<()> {
    let mut problems = g.validate();
    for m in &g.members {
        problems.extend(m.validate().into_iter().map(|v| format!("member `{}`: {v}", m.id)));
    }
    match problems.is_empty() {
        true => Ok(()),
        false => Err(Error::Invalid {
            line,
            message: problems.join("; "),
        }),
    }
}

fn shape_with<E: Environment>(
    env: &E,
    groups: &[(usize, RolloutGroup)],
    teacher: &TeacherSnapshot,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Vec<ShapedGroup>, ShapeSummary)> {
    if teacher.params.vocab() != env.vocab().words() {
        return Err(Error::Config(format!(
            "snapshot vocabulary does not match the {} vocabulary",
            env.kind().as_str()
        )));
    }
    let lambda = lambda_schedule(step, &cfg.shaping);
    let mode = cfg.extraction_mode();
    let mut out = Vec::with_capacity(groups.len());
    let mut summary = ShapeSummary::default();
    for (line, g) in groups {
        let at = |e: stepopsd_core::Error| Error::Invalid {
            line: *line,
            message: e.to_string(),
        };
        validate_group(*line, g)?;
        let rewards: Vec<f64> = g
            .members
            .iter()
            .map(|m| apply_reward_penalties(m, cfg.invalid_penalty))
            .collect();
        let adv = group_advantage(&rewards).map_err(at)?;
        let peer: Option<&Trajectory> = select_peer(g).map(|i| &g.members[i]);
        let mut records = Vec::with_capacity(g.members.len());
        let mut dropped = Vec::with_capacity(g.members.len());
        for (m, &a) in g.members.iter().zip(&adv) {
            let base = broadcast_token_advantages(m, a);
            let s = shape_member(
                env,
                m,
                peer,
                mode,
                &teacher.params,
                StudentSource::Recorded,
                &base,
                lambda,
                &cfg.shaping,
            )
            .map_err(at)?;
            summary.shaped_tokens += s.records.iter().filter(|r| r.delta.is_some()).count() as u64;
            summary.dropped += s.dropped as u64;
            dropped.push(s.dropped);
            records.push(s.records);
        }
        summary.groups += 1;
        summary.members += g.members.len() as u64;
        summary.skipped_no_peer += peer.is_none() as u64;
        out.push(shaped_group(g, Some(step), lambda, &adv, &records, &dropped));
    }
    Ok((out, summary))
}

/// Shapes parsed groups with the teacher snapshot at the λ of `step`, using
/// the log-probabilities recorded in the groups as the student side.
pub fn shape_groups(
    groups: &[(usize, RolloutGroup)],
    teacher: &TeacherSnapshot,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Vec<ShapedGroup>, ShapeSummary)> {
    cfg.validate()?;
    match cfg.env {
        EnvKind::LatchWorld => shape_with(&cfg.latchworld(), groups, teacher, cfg, step),
        EnvKind::FactChain => shape_with(&cfg.factchain(), groups, teacher, cfg, step),
    }
}

/// Reads `input`, writes shaped JSONL to `output`. Shaped files are valid
/// inputs too: the extra fields are ignored on re-read.
pub fn shape_offline(
    input: &Path,
    output: &Path,
    teacher: &TeacherSnapshot,
    cfg: &TrainConfig,
    step: u64,
) -> Result<ShapeSummary> {
    let groups: Vec<(usize, RolloutGroup)> = read_jsonl_file(input)?;
    let (shaped, summary) = shape_groups(&groups, teacher, cfg, step)?;
    let f = File::create(output).map_err(|e| Error::io(output, e))?;
    let mut w = BufWriter::new(f);
    for g in &shaped {
        let line = serde_json::to_string(g).expect("shaped groups always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(output, e))?;
    }
    w.flush().map_err(|e| Error::io(output, e))?;
    Ok(summary)
}
