//! Multi-turn rollouts and rollout groups.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment reward for a successful episode, before penalties.
pub const SUCCESS_REWARD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observation,
    Action,
    Reasoning,
    Answer,
    /// Tag delimiters emitted by the policy.
    Structural,
}

impl Role {
    /// True for tokens the policy produced (everything the environment did not render).
    pub fn is_policy(self) -> bool {
        self != Role::Observation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub role: Role,
    /// Student log-probability at rollout time, in nats.
    #[serde(rename = "logprob")]
    pub student_logprob: f64,
    #[serde(rename = "turn")]
    pub turn_index: u32,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, role: Role, student_logprob: f64, turn_index: u32) -> Self {
        Self {
            text: text.into(),
            role,
            student_logprob,
            turn_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    /// Environment reward before penalties.
    pub reward: f64,
    pub success: bool,
    pub invalid_action_count: u32,
    pub tokens: Vec<TokenRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub group_id: String,
    pub prompt: String,
    pub members: Vec<Trajectory>,
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::Range { start, end, len: 0 });
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start..self.end).contains(&index)
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A broken trajectory invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyTrajectory,
    PositiveLogprob { index: usize },
    NonFiniteLogprob { index: usize },
    NonFiniteReward,
    TurnOrder { index: usize },
    SuccessRewardMismatch { reward: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTrajectory => write!(f, "empty trajectory"),
            Violation::PositiveLogprob { index } => {
                write!(f, "token {index}: student logprob > 0")
            }
            Violation::NonFiniteLogprob { index } => {
                write!(f, "token {index}: student logprob not finite")
            }
            Violation::NonFiniteReward => write!(f, "reward not finite"),
            Violation::TurnOrder { index } => {
                write!(f, "token {index}: turn index decreases")
            }
            Violation::SuccessRewardMismatch { reward } => {
                write!(f, "successful trajectory has reward {reward}, expected {SUCCESS_REWARD}")
            }
        }
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Lists every violated invariant; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut report = Vec::new();
        if self.tokens.is_empty() {
            report.push(Violation::EmptyTrajectory);
        }
        if !self.reward.is_finite() {
            report.push(Violation::NonFiniteReward);
        } else if self.success && self.reward != SUCCESS_REWARD {
            report.push(Violation::SuccessRewardMismatch { reward: self.reward });
        }
        let mut last_turn = 0;
        for (index, tok) in self.tokens.iter().enumerate() {
            if !tok.student_logprob.is_finite() {
                report.push(Violation::NonFiniteLogprob { index });
            } else if tok.student_logprob > 0.0 {
                report.push(Violation::PositiveLogprob { index });
            }
            if tok.turn_index < last_turn {
                report.push(Violation::TurnOrder { index });
            }
            last_turn = tok.turn_index;
        }
        report
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Tokens in `span`, in order.
    pub fn token_slice(&self, span: Span) -> Result<&[TokenRecord]> {
        if span.start >= span.end || span.end > self.tokens.len() {
            return Err(Error::Range {
                start: span.start,
                end: span.end,
                len: self.tokens.len(),
            });
        }
        Ok(&self.tokens[span.start..span.end])
    }
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Structural checks for a group plus each member's report, as strings.
    pub fn validate(&self) -> Vec<String> {
        use alloc::format;
        let mut report = Vec::new();
        if self.members.len() < 2 {
            report.push(format!("group {} has {} members, need >= 2", self.group_id, self.members.len()));
        }
        for m in &self.members {
            for v in m.validate() {
                report.push(format!("{}: {}", m.id, v));
            }
        }
        report
    }
}
