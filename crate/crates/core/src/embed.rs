//! Bag-of-tokens example embeddings and exhaustive cosine kNN over the
//! holdout set, used to pick in-context demonstrations.

use std::cmp::Ordering;

use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{Demo, DemoSet};

/// L2-normalized token-count vector of length V (all zeros for empty input).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Cosine similarity of two unit (or zero) vectors.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Maps an example to an embedding. The default is [`BagOfTokens`].
pub trait Embedder: Send + Sync {
    fn embed(&self, ex: &Example) -> Embedding;
}

/// Counts token ids over prompt ⊕ response (prompt ⊕ chosen for preference
/// pairs) and L2-normalizes.
#[derive(Debug, Clone, Copy)]
pub struct BagOfTokens {
    pub vocab: usize,
}

impl Embedder for BagOfTokens {
    fn embed(&self, ex: &Example) -> Embedding {
        embed_example(ex, self.vocab)
    }
}

pub fn embed_tokens(tokens: impl IntoIterator<Item = u32>, vocab: usize) -> Embedding {
    let mut v = vec![0.0; vocab];
    for t in tokens {
        v[t as usize] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Embedding(v)
}

pub fn embed_example(ex: &Example, vocab: usize) -> Embedding {
    embed_tokens(ex.prompt.iter().chain(ex.demo_response()).copied(), vocab)
}

/// One embedding per holdout example, in holdout order.
#[derive(Debug, Clone)]
pub struct EmbedIndex {
    entries: Vec<(usize, Embedding)>,
    demos: Vec<(Vec<u32>, Vec<u32>)>,
}

impl EmbedIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, Embedding)] {
        &self.entries
    }

    /// Same index with entries stored in a different order (ids unchanged).
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            entries: order.iter().map(|&i| self.entries[i].clone()).collect(),
            demos: order.iter().map(|&i| self.demos[i].clone()).collect(),
        }
    }
}

pub fn build_index(holdout: &Dataset, vocab: usize) -> Result<EmbedIndex> {
    build_index_with(holdout, &BagOfTokens { vocab })
}

pub fn build_index_with(holdout: &Dataset, f: &dyn Embedder) -> Result<EmbedIndex> {
    if holdout.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    Ok(EmbedIndex {
        entries: holdout.iter().enumerate().map(|(i, ex)| (i, f.embed(ex))).collect(),
        demos: holdout
            .iter()
            .map(|ex| (ex.prompt.clone(), ex.demo_response().to_vec()))
            .collect(),
    })
}

/// The `min(k, |index|)` most similar holdout examples, by descending cosine
/// similarity with ties broken by ascending holdout id.
pub fn knn(index: &EmbedIndex, query: &Embedding, k: usize) -> DemoSet {
    let mut scored: Vec<(f64, usize, usize)> = index
        .entries
        .iter()
        .enumerate()
        .map(|(slot, (id, e))| (query.cosine(e), *id, slot))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    scored.truncate(k.min(scored.len()));
    DemoSet {
        demos: scored
            .into_iter()
            .map(|(sim, id, slot)| Demo {
                holdout_id: id,
                similarity: sim,
                prompt: index.demos[slot].0.clone(),
                response: index.demos[slot].1.clone(),
            })
            .collect(),
    }
}
