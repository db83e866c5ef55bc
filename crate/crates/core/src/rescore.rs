//! Teacher-forced rescoring of realized step tokens.

use alloc::vec::Vec;

use crate::env::{turn_prefix, Environment};
use crate::error::{Error, Result};
use crate::extract::StepSegment;
use crate::policy::{masked_log_probs, PolicyInput, PolicyParams};
use crate::teacher::HindsightContext;
use crate::trajectory::Trajectory;
use crate::vocab::ContextToken;

/// Log-probabilities are floored here before subtraction.
pub const LOGPROB_FLOOR: f64 = -30.0;

/// Scores `realized[j]` given `context ⊕ realized[..j]`, in nats.
pub trait LogProbProvider {
    type Params;

    fn score(&self, params: &Self::Params, context: &[ContextToken], realized: &[ContextToken]) -> Result<Vec<f64>>;
}

/// Scores with the toy policy, renormalizing over the environment grammar.
#[derive(Debug, Clone, Copy)]
pub struct GrammarScorer<'e, E> {
    pub env: &'e E,
}

impl<'e, E> GrammarScorer<'e, E> {
    pub fn new(env: &'e E) -> Self {
        Self { env }
    }
}

impl<E: Environment> LogProbProvider for GrammarScorer<'_, E> {
    type Params = PolicyParams;

    fn score(&self, params: &PolicyParams, context: &[ContextToken], realized: &[ContextToken]) -> Result<Vec<f64>> {
        let mut buf = Vec::with_capacity(context.len() + realized.len());
        buf.extend_from_slice(context);
        let mut out = Vec::with_capacity(realized.len());
        for tok in realized {
            let prefix = turn_prefix(&buf, tok.turn);
            let allowed = self.env.allowed_next(&prefix);
            let pos = allowed.iter().position(|&t| t == tok.id).ok_or_else(|| {
                Error::Consistency(alloc::format!(
                    "token `{}` is not admitted by the grammar here",
                    self.env.vocab().word(tok.id)
                ))
            })?;
            let lp = if allowed.len() == 1 {
                0.0
            } else {
                masked_log_probs(
                    params,
                    PolicyInput {
                        context: &buf,
                        turn: tok.turn,
                    },
                    allowed,
                )[pos]
            };
            out.push(lp);
            buf.push(*tok);
        }
        Ok(out)
    }
}

/// One included token's gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRecord {
    /// Token index in the trajectory.
    pub index: usize,
    pub step: usize,
    /// Offset within the step span.
    pub position: usize,
    pub teacher_logprob: f64,
    pub student_logprob: f64,
    pub delta: f64,
}

/// Where student log-probabilities come from.
#[derive(Debug)]
pub enum StudentSource<'a, P> {
    /// Recompute under these parameters.
    Params(&'a P),
    /// Use the log-probabilities recorded at rollout time.
    Recorded,
}

impl<P> Clone for StudentSource<'_, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<P> Copy for StudentSource<'_, P> {}

fn floored(lp: f64, what: &'static str) -> Result<f64> {
    if lp.is_finite() {
        Ok(lp.max(LOGPROB_FLOOR))
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Gaps for the included tokens of one step, in token order.
///
/// `encoded` is the full encoding of `traj`; `ctx` must have been built for
/// `segment`.
pub fn score_step<P: LogProbProvider>(
    provider: &P,
    teacher: &P::Params,
    student: StudentSource<'_, P::Params>,
    ctx: &HindsightContext,
    traj: &Trajectory,
    encoded: &[ContextToken],
    segment: &StepSegment,
) -> Result<Vec<GapRecord>> {
    let span = segment.span;
    if span.end > encoded.len() || encoded.len() != traj.len() || span.start >= span.end {
        return Err(Error::Consistency(alloc::format!(
            "segment [{}, {}) does not fit a trajectory of {} tokens",
            span.start,
            span.end,
            traj.len()
        )));
    }
    if ctx.student_context.len() != span.start {
        return Err(Error::Consistency("context was built for a different step".into()));
    }
    let realized = &encoded[span.start..span.end];
    let t_lp = provider.score(teacher, &ctx.teacher_context, realized)?;
    let s_lp = match student {
        StudentSource::Params(p) => provider.score(p, &ctx.student_context, realized)?,
        StudentSource::Recorded => traj.tokens[span.start..span.end]
            .iter()
            .map(|t| t.student_logprob)
            .collect(),
    };
    if t_lp.len() != realized.len() || s_lp.len() != realized.len() {
        return Err(Error::Consistency("provider returned a wrong number of scores".into()));
    }
    let mut out = Vec::with_capacity(segment.included_count());
    for index in segment.included_indices() {
        let position = index - span.start;
        let teacher_logprob = floored(t_lp[position], "teacher logprob")?;
        let student_logprob = floored(s_lp[position], "student logprob")?;
        out.push(GapRecord {
            index,
            step: segment.step_index,
            position,
            teacher_logprob,
            student_logprob,
            delta: teacher_logprob - student_logprob,
        });
    }
    Ok(out)
}
