//! Stale reference teacher and hindsight-enriched contexts.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::extract::StepSegment;
use crate::policy::PolicyParams;
use crate::trajectory::{Role, RolloutGroup, Trajectory};
use crate::vocab::{ContextToken, Vocab, FRAME_TURN};

/// Frozen copy of the policy taken at a multiple of the refresh interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    pub params: Arc<PolicyParams>,
    pub taken_at_step: u64,
}

impl TeacherSnapshot {
    pub fn take(params: &PolicyParams, step: u64) -> Self {
        Self {
            params: Arc::new(params.clone()),
            taken_at_step: step,
        }
    }
}

/// Re-snapshots `current` iff `step` is a multiple of `interval`.
pub fn maybe_refresh(
    snapshot: TeacherSnapshot,
    current: &PolicyParams,
    step: u64,
    interval: u64,
) -> Result<TeacherSnapshot> {
    if interval == 0 {
        return Err(Error::Config("teacher refresh interval must be >= 1".into()));
    }
    if step % interval == 0 {
        Ok(TeacherSnapshot::take(current, step))
    } else {
        Ok(snapshot)
    }
}

/// Index of the first successful member, in rollout order.
pub fn select_peer(group: &RolloutGroup) -> Option<usize> {
    group.members.iter().position(|m| m.success)
}

/// Why a trajectory gets no shaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unshaped {
    Successful,
    NoPeer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HindsightContext {
    /// Causal prefix: every token strictly before the step.
    pub student_context: Vec<ContextToken>,
    /// Framed peer rendering, `<hindsight> … </hindsight>`.
    pub hindsight: Option<Vec<ContextToken>>,
    /// `hindsight ⊕ student_context`, or the student context when unshaped.
    pub teacher_context: Vec<ContextToken>,
    pub unshaped: Option<Unshaped>,
}

/// Frames the peer's non-observation tokens in a hindsight block.
pub fn render_hindsight(vocab: &Vocab, peer: &Trajectory) -> Result<Vec<ContextToken>> {
    let frame = |id| ContextToken {
        id,
        role: Role::Structural,
        turn: FRAME_TURN,
    };
    let mut out = Vec::with_capacity(peer.tokens.len() + 2);
    out.push(frame(vocab.hindsight_open()));
    for t in peer.tokens.iter().filter(|t| t.role.is_policy()) {
        out.push(vocab.encode_record(t)?);
    }
    out.push(frame(vocab.hindsight_close()));
    Ok(out)
}

/// Builds student and teacher contexts for one step of `traj`.
///
/// Successful trajectories and failures without a peer are left unshaped.
pub fn build_contexts(
    vocab: &Vocab,
    traj: &Trajectory,
    segment: &StepSegment,
    peer: Option<&Trajectory>,
) -> Result<HindsightContext> {
    if segment.span.end > traj.len() || segment.span.start >= segment.span.end {
        return Err(Error::Consistency(alloc::format!(
            "segment [{}, {}) not within trajectory of {} tokens",
            segment.span.start,
            segment.span.end,
            traj.len()
        )));
    }
    let student_context = traj.tokens[..segment.span.start]
        .iter()
        .map(|t| vocab.encode_record(t))
        .collect::<Result<Vec<_>>>()?;
    build_contexts_encoded(vocab, traj.success, student_context, peer)
}

/// As [`build_contexts`] with the prefix already encoded.
pub fn build_contexts_encoded(
    vocab: &Vocab,
    success: bool,
    student_context: Vec<ContextToken>,
    peer: Option<&Trajectory>,
) -> Result<HindsightContext> {
    let (hindsight, unshaped) = match (success, peer) {
        (true, _) => (None, Some(Unshaped::Successful)),
        (false, None) => (None, Some(Unshaped::NoPeer)),
        (false, Some(p)) => (Some(render_hindsight(vocab, p)?), None),
    };
    let teacher_context = match &hindsight {
        Some(h) => {
            let mut c = h.clone();
            c.extend_from_slice(&student_context);
            c
        }
        None => student_context.clone(),
    };
    Ok(HindsightContext {
        student_context,
        hindsight,
        teacher_context,
        unshaped,
    })
}
