//! Tag-aligned step segmentation.
//!
//! The tag grammar is flat: balanced `<name>` / `</name>` pairs from
//! [`STEP_TAGS`], never nested. Unbalanced or nested tags are hard errors,
//! because a silently mis-segmented trajectory would corrupt credit assignment.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Role, Span, Trajectory};

/// Tag names recognized by the scanner.
pub const STEP_TAGS: [&str; 6] = ["action", "think", "search", "information", "answer", "obs"];

/// Tags whose contents are policy actions in `action_only` mode.
const ACTION_TAGS: [&str; 2] = ["action", "search"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// Only action tokens inside action-like tags.
    ActionOnly,
    /// One full assistant turn minus observation tokens.
    CleanStepNoObservation,
}

impl ExtractionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionMode::ActionOnly => "action_only",
            ExtractionMode::CleanStepNoObservation => "clean_step_no_observation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSegment {
    pub step_index: usize,
    pub span: Span,
    /// One flag per token of `span`: whether that token is shaped.
    pub included_mask: Vec<bool>,
}

impl StepSegment {
    /// Absolute indices of the included tokens.
    pub fn included_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.included_mask
            .iter()
            .enumerate()
            .filter(|(_, &inc)| inc)
            .map(move |(i, _)| self.span.start + i)
    }

    pub fn included_count(&self) -> usize {
        self.included_mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag<'a> {
    Open(&'a str),
    Close(&'a str),
}

fn parse_tag(text: &str) -> Option<Tag<'_>> {
    let inner = text.strip_prefix('<')?.strip_suffix('>')?;
    let (close, name) = match inner.strip_prefix('/') {
        Some(n) => (true, n),
        None => (false, inner),
    };
    if !STEP_TAGS.contains(&name) {
        return None;
    }
    Some(if close { Tag::Close(name) } else { Tag::Open(name) })
}

/// A balanced tag block: open index, close index, tag name.
struct Block<'a> {
    open: usize,
    close: usize,
    name: &'a str,
}

fn scan_blocks(traj: &Trajectory) -> Result<Vec<Block<'_>>> {
    let mut blocks = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tok) in traj.tokens.iter().enumerate() {
        match parse_tag(&tok.text) {
            Some(Tag::Open(name)) => {
                if let Some((oi, outer)) = open {
                    return Err(Error::NestedTag {
                        tag: name.to_string(),
                        index: i,
                        outer: outer.to_string(),
                        outer_index: oi,
                    });
                }
                open = Some((i, name));
            }
            Some(Tag::Close(name)) => match open.take() {
                Some((oi, outer)) if outer == name => blocks.push(Block {
                    open: oi,
                    close: i,
                    name,
                }),
                Some((oi, outer)) => {
                    return Err(Error::UnbalancedTag {
                        tag: String::from(outer),
                        index: oi,
                    })
                }
                None => {
                    return Err(Error::UnbalancedTag {
                        tag: alloc::format!("/{name}"),
                        index: i,
                    })
                }
            },
            None => {}
        }
    }
    if let Some((oi, name)) = open {
        return Err(Error::UnbalancedTag {
            tag: name.to_string(),
            index: oi,
        });
    }
    Ok(blocks)
}

/// Splits a trajectory into disjoint, ordered step segments.
///
/// Trajectories with nothing to extract yield an empty list.
pub fn extract_steps(traj: &Trajectory, mode: ExtractionMode) -> Result<Vec<StepSegment>> {
    let blocks = scan_blocks(traj)?;
    let mut segments = Vec::new();
    match mode {
        ExtractionMode::ActionOnly => {
            for b in blocks.iter().filter(|b| ACTION_TAGS.contains(&b.name)) {
                if b.close <= b.open + 1 {
                    continue;
                }
                let span = Span {
                    start: b.open + 1,
                    end: b.close,
                };
                let mask: Vec<bool> = traj.tokens[span.start..span.end]
                    .iter()
                    .map(|t| t.role == Role::Action)
                    .collect();
                if mask.iter().any(|&m| m) {
                    segments.push(StepSegment {
                        step_index: segments.len(),
                        span,
                        included_mask: mask,
                    });
                }
            }
        }
        ExtractionMode::CleanStepNoObservation => {
            let tokens = &traj.tokens;
            let mut i = 0;
            while i < tokens.len() {
                let turn = tokens[i].turn_index;
                let mut j = i;
                while j < tokens.len() && tokens[j].turn_index == turn {
                    j += 1;
                }
                let first = (i..j).find(|&k| tokens[k].role.is_policy());
                let last = (i..j).rev().find(|&k| tokens[k].role.is_policy());
                if let (Some(a), Some(b)) = (first, last) {
                    let span = Span { start: a, end: b + 1 };
                    let mask = tokens[a..=b].iter().map(|t| t.role.is_policy()).collect();
                    segments.push(StepSegment {
                        step_index: segments.len(),
                        span,
                        included_mask: mask,
                    });
                }
                i = j;
            }
        }
    }
    Ok(segments)
}

/// `true` exactly for tokens whose role is not `observation`.
pub fn mask_observations(traj: &Trajectory) -> Vec<bool> {
    traj.tokens.iter().map(|t| t.role.is_policy()).collect()
}

/// Per-token flag: included in some segment.
pub fn included_union(len: usize, segments: &[StepSegment]) -> Vec<bool> {
    let mut out = vec![false; len];
    for s in segments {
        for i in s.included_indices() {
            out[i] = true;
        }
    }
    out
}
