//! Sequence layout for (optionally conditioned) scoring.
//!
//! ```text
//! positions:  ... | p1 SEP r1 SEP | p2 SEP r2 SEP | x SEP y
//!                                                ^ query_offset
//! ```
//!
//! The query `x SEP y` always starts at `query_offset`; demonstrations are
//! right-aligned into the positions before it. The separator is the last
//! vocabulary id.

use super::ModelConfig;
use crate::corpus::Token;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub holdout_id: usize,
    pub similarity: f64,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

impl Demo {
    pub fn serialized_len(&self) -> usize {
        self.prompt.len() + self.response.len() + 2
    }
}

/// Ordered in-context demonstrations, most similar first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoSet {
    pub demos: Vec<Demo>,
}

impl DemoSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.demos.iter().map(|d| d.holdout_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Serialized {
    pub tokens: Vec<Token>,
    /// Absolute position of `tokens[0]`.
    pub start_pos: usize,
    /// Index into `tokens` of the first response token.
    pub y_start: usize,
    /// Number of demonstrations that survived truncation.
    pub used_demos: usize,
}

/// Lays out `demos ⊕ x ⊕ SEP ⊕ y`. Demonstrations that do not fit before
/// `query_offset` are dropped from the tail of the list; `x` and `y` are never
/// truncated.
pub fn serialize_query(cfg: &ModelConfig, demos: &[Demo], x: &[Token], y: &[Token]) -> Result<Serialized> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySequence);
    }
    let sep = (cfg.vocab - 1) as Token;
    let qlen = x.len() + 1 + y.len();
    if qlen > cfg.max_query_len() {
        return Err(Error::ContextOverflow {
            len: cfg.query_offset + qlen,
            n_ctx: cfg.n_ctx,
        });
    }
    let mut budget = cfg.query_offset;
    let mut used = 0;
    for d in demos {
        let n = d.serialized_len();
        if n > budget {
            break;
        }
        budget -= n;
        used += 1;
    }
    let demo_len = cfg.query_offset - budget;
    let mut tokens = Vec::with_capacity(demo_len + qlen);
    for d in &demos[..used] {
        tokens.extend_from_slice(&d.prompt);
        tokens.push(sep);
        tokens.extend_from_slice(&d.response);
        tokens.push(sep);
    }
    tokens.extend_from_slice(x);
    tokens.push(sep);
    let y_start = tokens.len();
    tokens.extend_from_slice(y);
    Ok(Serialized {
        tokens,
        start_pos: cfg.query_offset - demo_len,
        y_start,
        used_demos: used,
    })
}
