//! Feature-hashed linear softmax policy with exact gradients.
//!
//! Features of a context are hashed n-grams (n ≤ 3) over the last
//! [`WINDOW`] tokens (n-grams ending at the final token are hashed apart from
//! the rest), a turn bucket, and a bias. The logit of token `v` is the sum of
//! column `v` over the active feature rows.
//!
//! A context may start with a `<hindsight> … </hindsight>` block. Tokens in
//! that block are not featurized; instead, policy tokens of the block that
//! belong to the turn being predicted get a fixed `copy_bias` added to their
//! logit. The bias is a structural constant of the model, not a trained weight.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::trajectory::Role;
use crate::vocab::{ContextToken, TokenId, Vocab, HINDSIGHT_CLOSE, HINDSIGHT_OPEN};

pub const DEFAULT_DIM: usize = 1 << 16;
pub const WINDOW: usize = 8;
pub const MAX_NGRAM: usize = 3;
pub const TURN_BUCKETS: u32 = 16;
pub const DEFAULT_HASH_SEED: u64 = 0x5eed_0f5d;
pub const DEFAULT_COPY_BIAS: f64 = 1.0;

const BIAS_KEY: u64 = 0xb1a5;
const TURN_KEY: u64 = 0x7u64 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dim: usize,
    hash_seed: u64,
    copy_bias: f64,
    vocab: Vec<String>,
    hindsight_open: Option<TokenId>,
    hindsight_close: Option<TokenId>,
    /// Row-major `dim × vocab.len()`.
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab: &Vocab, dim: usize, hash_seed: u64, copy_bias: f64) -> Result<Self> {
        Self::from_parts(
            dim,
            hash_seed,
            copy_bias,
            vocab.words().to_vec(),
            vec![0.0; dim * vocab.len()],
        )
    }

    pub fn from_parts(
        dim: usize,
        hash_seed: u64,
        copy_bias: f64,
        vocab: Vec<String>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if !dim.is_power_of_two() {
            return Err(Error::Config(alloc::format!("feature dimension {dim} is not a power of two")));
        }
        if vocab.is_empty() || vocab.len() > u16::MAX as usize {
            return Err(Error::Config("vocabulary size out of range".to_string()));
        }
        if weights.len() != dim * vocab.len() {
            return Err(Error::Consistency(alloc::format!(
                "weights have {} entries, expected {}",
                weights.len(),
                dim * vocab.len()
            )));
        }
        if !copy_bias.is_finite() {
            return Err(Error::NonFinite("copy_bias"));
        }
        let find = |w: &str| vocab.iter().position(|x| x == w).map(|i| TokenId(i as u16));
        Ok(Self {
            dim,
            hash_seed,
            copy_bias,
            hindsight_open: find(HINDSIGHT_OPEN),
            hindsight_close: find(HINDSIGHT_CLOSE),
            vocab,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn copy_bias(&self) -> f64 {
        self.copy_bias
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.vocab.len();
        &self.weights[row * v..(row + 1) * v]
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Rows with at least one non-zero weight.
    pub fn nonzero_rows(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.weights
            .chunks_exact(self.vocab.len())
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&w| w != 0.0))
    }

    /// `weights += scale * grad`.
    pub fn apply(&mut self, grad: &SparseGrad, scale: f64) {
        let v = self.vocab.len();
        for (&row, g) in &grad.rows {
            let dst = &mut self.weights[row as usize * v..(row as usize + 1) * v];
            for (w, gi) in dst.iter_mut().zip(g) {
                *w += scale * gi;
            }
        }
    }
}

/// Context plus the turn of the token being predicted.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub context: &'a [ContextToken],
    pub turn: u32,
}

/// Active feature rows (with multiplicity) and hindsight copy targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Features {
    pub rows: Vec<u32>,
    pub copy_targets: Vec<TokenId>,
}

fn ngram_hash(seed: u64, ids: &[ContextToken], suffix: bool) -> u64 {
    let mut h = mix64(seed ^ ((ids.len() as u64) << 56) ^ (suffix as u64) << 48);
    for t in ids {
        h = mix64(h ^ (t.id.0 as u64 + 1));
    }
    h
}

/// Splits off a leading hindsight block: `(block, rest)`.
fn split_hindsight<'a>(
    params: &PolicyParams,
    context: &'a [ContextToken],
) -> (&'a [ContextToken], &'a [ContextToken]) {
    if let (Some(open), Some(close)) = (params.hindsight_open, params.hindsight_close) {
        if context.first().map(|t| t.id) == Some(open) {
            if let Some(end) = context.iter().position(|t| t.id == close) {
                return (&context[1..end], &context[end + 1..]);
            }
        }
    }
    (&[], context)
}

pub fn features(params: &PolicyParams, input: PolicyInput<'_>) -> Features {
    let (block, rest) = split_hindsight(params, input.context);
    let window = &rest[rest.len().saturating_sub(WINDOW)..];
    let mask = (params.dim - 1) as u64;
    let mut rows = Vec::with_capacity(WINDOW * MAX_NGRAM + 2);
    rows.push((mix64(params.hash_seed ^ BIAS_KEY) & mask) as u32);
    let bucket = input.turn.min(TURN_BUCKETS - 1) as u64;
    rows.push((mix64(params.hash_seed ^ TURN_KEY ^ bucket) & mask) as u32);
    for n in 1..=MAX_NGRAM.min(window.len()) {
        for start in 0..=window.len() - n {
            let suffix = start + n == window.len();
            rows.push((ngram_hash(params.hash_seed, &window[start..start + n], suffix) & mask) as u32);
        }
    }
    let mut copy_targets: Vec<TokenId> = block
        .iter()
        .filter(|t| t.turn == input.turn && matches!(t.role, Role::Action | Role::Answer | Role::Reasoning))
        .map(|t| t.id)
        .collect();
    copy_targets.sort_unstable();
    copy_targets.dedup();
    Features { rows, copy_targets }
}

pub fn logits_from(params: &PolicyParams, feats: &Features) -> Vec<f64> {
    let mut logits = vec![0.0; params.vocab_size()];
    for &r in &feats.rows {
        for (l, w) in logits.iter_mut().zip(params.row(r as usize)) {
            *l += w;
        }
    }
    for t in &feats.copy_targets {
        logits[t.index()] += params.copy_bias;
    }
    logits
}

pub fn logits(params: &PolicyParams, input: PolicyInput<'_>) -> Vec<f64> {
    logits_from(params, &features(params, input))
}

/// Log-softmax of `logits` restricted to `allowed`, in `allowed` order.
fn masked_log_softmax(logits: &[f64], allowed: &[TokenId]) -> Vec<f64> {
    let max = allowed
        .iter()
        .map(|t| logits[t.index()])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = allowed.iter().map(|t| libm::exp(logits[t.index()] - max)).sum();
    let lse = max + libm::log(sum);
    allowed.iter().map(|t| logits[t.index()] - lse).collect()
}

fn all_tokens(params: &PolicyParams) -> Vec<TokenId> {
    (0..params.vocab_size() as u16).map(TokenId).collect()
}

/// Full-vocabulary softmax distribution.
pub fn policy_distribution(params: &PolicyParams, input: PolicyInput<'_>) -> Vec<f64> {
    let l = logits(params, input);
    masked_log_softmax(&l, &all_tokens(params))
        .into_iter()
        .map(libm::exp)
        .collect()
}

/// Log-probabilities over `allowed` (renormalized), in `allowed` order.
pub fn masked_log_probs(params: &PolicyParams, input: PolicyInput<'_>, allowed: &[TokenId]) -> Vec<f64> {
    masked_log_softmax(&logits(params, input), allowed)
}

/// `log π(token | input)`, renormalized over `allowed` when given.
pub fn log_prob(
    params: &PolicyParams,
    input: PolicyInput<'_>,
    token: TokenId,
    allowed: Option<&[TokenId]>,
) -> Result<f64> {
    let owned;
    let allowed = match allowed {
        Some(a) => a,
        None => {
            owned = all_tokens(params);
            &owned
        }
    };
    let pos = allowed
        .iter()
        .position(|&t| t == token)
        .ok_or_else(|| Error::Consistency(alloc::format!("token {} not allowed here", token.0)))?;
    Ok(masked_log_probs(params, input, allowed)[pos])
}

/// Sparse gradient over weight rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub rows: BTreeMap<u32, Vec<f64>>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &SparseGrad, scale: f64) {
        for (&r, g) in &other.rows {
            let dst = self.rows.entry(r).or_insert_with(|| vec![0.0; g.len()]);
            for (d, x) in dst.iter_mut().zip(g) {
                *d += scale * x;
            }
        }
    }

    pub fn dot(&self, other: &SparseGrad) -> f64 {
        let mut acc = 0.0;
        for (r, a) in &self.rows {
            if let Some(b) = other.rows.get(r) {
                acc += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn all_finite(&self) -> bool {
        self.rows.values().flatten().all(|x| x.is_finite())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows.get(&(row as u32)).map_or(0.0, |r| r[col])
    }
}

/// `∇_W log π(token | input)`, with the softmax renormalized over `allowed`
/// when given: every active row receives `onehot(token) − p`.
pub fn grad_logprob(
    params: &PolicyParams,
    input: PolicyInput<'_>,
    token: TokenId,
    allowed: Option<&[TokenId]>,
) -> Result<SparseGrad> {
    let mut g = SparseGrad::new();
    accumulate_grad(params, input, token, allowed, 1.0, &mut g)?;
    Ok(g)
}

/// `out += coeff · ∇_W log π(token | input)`; returns `log π(token | input)`.
pub fn accumulate_grad(
    params: &PolicyParams,
    input: PolicyInput<'_>,
    token: TokenId,
    allowed: Option<&[TokenId]>,
    coeff: f64,
    out: &mut SparseGrad,
) -> Result<f64> {
    let owned;
    let allowed = match allowed {
        Some(a) => a,
        None => {
            owned = all_tokens(params);
            &owned
        }
    };
    let pos = allowed
        .iter()
        .position(|&t| t == token)
        .ok_or_else(|| Error::Consistency(alloc::format!("token {} not allowed here", token.0)))?;
    let feats = features(params, input);
    let lp = masked_log_softmax(&logits_from(params, &feats), allowed);
    let v = params.vocab_size();
    let mut delta = vec![0.0; v];
    for (i, t) in allowed.iter().enumerate() {
        delta[t.index()] = -libm::exp(lp[i]);
    }
    delta[token.index()] += 1.0;
    for &r in &feats.rows {
        let dst = out.rows.entry(r).or_insert_with(|| vec![0.0; v]);
        for (d, x) in dst.iter_mut().zip(&delta) {
            *d += coeff * x;
        }
    }
    Ok(lp[pos])
}
