//! Deterministic text environments.
//!
//! Both environments speak a closed word-level vocabulary. A policy turn is a
//! short tagged command generated token by token under the environment's
//! grammar ([`Environment::allowed_next`]); the environment answers with a
//! tagged observation.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::trajectory::Role;
use crate::vocab::{ContextToken, TokenId, Vocab};

pub mod factchain;
pub mod latch;

pub use factchain::{FactChain, FactState};
pub use latch::{LatchState, LatchWorld, Template};

/// Text rendered for inapplicable actions.
pub const NOTHING_HAPPENS: [&str; 2] = ["nothing", "happens"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    LatchWorld,
    FactChain,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::LatchWorld => "latchworld",
            EnvKind::FactChain => "factchain",
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latchworld" => Ok(EnvKind::LatchWorld),
            "factchain" => Ok(EnvKind::FactChain),
            other => Err(Error::Config(alloc::format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<S> {
    pub observation: Vec<TokenId>,
    pub state: S,
    pub done: bool,
    pub reward: f64,
    pub invalid: bool,
}

pub trait Environment {
    type State: Clone + PartialEq + Debug;

    fn kind(&self) -> EnvKind;
    fn vocab(&self) -> &Vocab;
    fn max_turns(&self) -> u32;

    /// Initial state and observation for a task seed.
    fn reset(&self, task_seed: u64) -> (Self::State, Vec<TokenId>);

    /// Applies one policy turn (tags included). Malformed turns are invalid actions.
    fn step(&self, state: &Self::State, action: &[TokenId]) -> StepOutcome<Self::State>;

    /// Tokens the grammar allows after `turn_prefix`; empty once the turn is complete.
    fn allowed_next(&self, turn_prefix: &[TokenId]) -> &[TokenId];

    /// Role of `token` when emitted after `turn_prefix`.
    fn role_of(&self, turn_prefix: &[TokenId], token: TokenId) -> Role;

    /// One reference turn that makes progress from `state`, if the task is solvable.
    fn expert_turn(&self, state: &Self::State) -> Option<Vec<TokenId>>;

    fn is_done(&self, state: &Self::State) -> bool;

    fn is_success(&self, state: &Self::State) -> bool;

    fn turn(&self, state: &Self::State) -> u32;

    fn render(&self, ids: &[TokenId]) -> String {
        let v = self.vocab();
        let mut out = String::new();
        for (i, id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(v.word(*id));
        }
        out
    }

    fn encode_words(&self, words: &[&str]) -> Vec<TokenId> {
        words.iter().map(|w| self.vocab().id(w)).collect()
    }
}

/// Replays `turns` from `reset(task_seed)`, stopping at termination; returns
/// the final state, the last reward and whether the episode terminated.
pub fn replay<E: Environment>(env: &E, task_seed: u64, turns: &[Vec<TokenId>]) -> (E::State, f64, bool) {
    let (mut state, _) = env.reset(task_seed);
    let mut reward = 0.0;
    for t in turns {
        if env.is_done(&state) || env.turn(&state) >= env.max_turns() {
            break;
        }
        let out = env.step(&state, t);
        reward = out.reward;
        state = out.state;
    }
    let done = env.is_done(&state);
    (state, reward, done)
}

/// Ids of the same-turn policy tokens that end `context`: the grammar prefix
/// of the next token in `turn`.
pub fn turn_prefix(context: &[ContextToken], turn: u32) -> Vec<TokenId> {
    let start = context
        .iter()
        .rposition(|t| t.turn != turn || !t.role.is_policy())
        .map_or(0, |i| i + 1);
    context[start..].iter().map(|t| t.id).collect()
}
