//! Per-example data-value scores.
//!
//! * ICA: ℓ(y | x; θ_t) − ℓ(y | x, C^k; θ_t), with C^k the kNN holdout demos.
//! * RHO: ℓ(y | x; θ_t) − ℓ(y | x; θ_ref), θ_ref trained on the holdout only.
//! * One-shot: L(D_ho; θ_0) − L(D_ho | (x, y); θ_0).
//! * One-step oracle: L(D_ho; θ) − L(D_ho; θ − lr·∇ℓ(x, y; θ)).
//!
//! Every scorer is side-effect free, so a dataset pass is a parallel map.

mod stats;

pub use stats::{pearson, ranks, spearman};

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example};
use crate::embed::{embed_example, knn, EmbedIndex};
use crate::error::{Error, Result};
use crate::model::{example_loss, loss_and_grad, Demo, DemoSet, LossSpec, ModelParams};
use crate::train::{evaluate_holdout, train_standard, TrainConfig};

/// Largest base ∪ {candidate} set the retraining oracle accepts.
pub const RETRAIN_BUDGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Ica,
    Rho,
    OneShot,
    OracleOneStep,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Ica => "ica",
            ScorerKind::Rho => "rho",
            ScorerKind::OneShot => "one_shot",
            ScorerKind::OracleOneStep => "oracle_one_step",
        }
    }
}

/// Checkpoints some scorers need besides the current parameters.
#[derive(Debug, Clone, Default)]
pub struct AuxCheckpoints {
    /// θ*(D_ho) for RHO.
    pub rho_reference: Option<Arc<ModelParams>>,
    /// θ_0 for one-shot.
    pub initial: Option<Arc<ModelParams>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEntry {
    pub score: f64,
    pub computed_at_step: usize,
}

/// One raw score per train example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreTable {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub kind: ScorerKind,
    /// kNN demonstrations per candidate (ICA).
    pub k: usize,
    /// Step size of the one-step oracle.
    pub oracle_lr: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Ica,
            k: 3,
            oracle_lr: 1e-2,
        }
    }
}

/// The kNN demonstration set for one candidate.
pub fn demos_for(ex: &Example, index: &EmbedIndex, k: usize, vocab: usize) -> DemoSet {
    knn(index, &embed_example(ex, vocab), k)
}

pub fn ica_score(p: &ModelParams, spec: &LossSpec, ex: &Example, demos: &DemoSet) -> Result<f64> {
    if demos.is_empty() {
        return Ok(0.0);
    }
    Ok(example_loss(p, spec, ex, None)? - example_loss(p, spec, ex, Some(demos))?)
}

pub fn rho_score(p: &ModelParams, reference: &ModelParams, spec: &LossSpec, ex: &Example) -> Result<f64> {
    p.check_congruent(reference)?;
    Ok(example_loss(p, spec, ex, None)? - example_loss(reference, spec, ex, None)?)
}

fn holdout_conditioned_on(initial: &ModelParams, spec: &LossSpec, ex: &Example, holdout: &Dataset) -> Result<f64> {
    let demos = DemoSet {
        demos: vec![Demo {
            holdout_id: usize::MAX,
            similarity: 1.0,
            prompt: ex.prompt.clone(),
            response: ex.demo_response().to_vec(),
        }],
    };
    let mut sum = 0.0;
    for h in holdout.iter() {
        sum += example_loss(initial, spec, h, Some(&demos))?;
    }
    Ok(sum / holdout.len() as f64)
}

/// One-shot score with a precomputed zero-shot holdout loss.
fn oneshot_with_base(initial: &ModelParams, spec: &LossSpec, ex: &Example, holdout: &Dataset, base: f64) -> Result<f64> {
    Ok(base - holdout_conditioned_on(initial, spec, ex, holdout)?)
}

pub fn oneshot_score(initial: &ModelParams, spec: &LossSpec, ex: &Example, holdout: &Dataset) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    let base = evaluate_holdout(initial, holdout, spec)?;
    oneshot_with_base(initial, spec, ex, holdout, base)
}

fn one_step_with_base(p: &ModelParams, spec: &LossSpec, ex: &Example, holdout: &Dataset, lr: f64, base: f64) -> Result<f64> {
    if lr == 0.0 {
        return Ok(0.0);
    }
    let (_, g) = loss_and_grad(p, spec, ex, None)?;
    let mut q = p.clone();
    q.sgd_step(&g, lr);
    Ok(base - evaluate_holdout(&q, holdout, spec)?)
}

/// Holdout-loss drop after one SGD step of size `lr` on `ex`. `p` is untouched.
pub fn oracle_one_step_gain(p: &ModelParams, spec: &LossSpec, ex: &Example, holdout: &Dataset, lr: f64) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    let base = evaluate_holdout(p, holdout, spec)?;
    one_step_with_base(p, spec, ex, holdout, lr, base)
}

/// Mean holdout loss of a model trained from `init` on `base ∪ {candidate}`
/// with standard (unweighted) training. Refuses sets above [`RETRAIN_BUDGET`].
pub fn oracle_retrain(
    base: &Dataset,
    candidate: &Example,
    holdout: &Dataset,
    init: &ModelParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    if base.len() + 1 > RETRAIN_BUDGET {
        return Err(Error::OracleBudget(format!(
            "{} examples exceed the retraining budget of {RETRAIN_BUDGET}",
            base.len() + 1
        )));
    }
    let mut set = base.clone();
    set.push(candidate.clone())?;
    let mut cfg = cfg.clone();
    cfg.batch_size = cfg.batch_size.min(set.len());
    let (theta, _) = train_standard(&set, holdout, None, init, &cfg)?;
    let spec = cfg.loss_spec(init)?;
    evaluate_holdout(&theta, holdout, &spec)
}

/// Scores every example of `dataset` at parameters `p`.
#[allow(clippy::too_many_arguments)]
pub fn score_dataset(
    p: &ModelParams,
    spec: &LossSpec,
    dataset: &Dataset,
    holdout: &Dataset,
    cfg: &ScoreConfig,
    index: &EmbedIndex,
    aux: &AuxCheckpoints,
    step: usize,
) -> Result<ScoreTable> {
    let vocab = p.config().vocab;
    let scores: Vec<f64> = match cfg.kind {
        ScorerKind::Ica => dataset
            .examples()
            .par_iter()
            .map(|ex| ica_score(p, spec, ex, &demos_for(ex, index, cfg.k, vocab)))
            .collect::<Result<_>>()?,
        ScorerKind::Rho => {
            let r = aux.rho_reference.as_deref().ok_or(Error::MissingCheckpoint("RHO reference"))?;
            dataset
                .examples()
                .par_iter()
                .map(|ex| rho_score(p, r, spec, ex))
                .collect::<Result<_>>()?
        }
        ScorerKind::OneShot => {
            let init = aux.initial.as_deref().ok_or(Error::MissingCheckpoint("initial checkpoint"))?;
            if holdout.is_empty() {
                return Err(Error::EmptyHoldout);
            }
            let base = evaluate_holdout(init, holdout, spec)?;
            dataset
                .examples()
                .par_iter()
                .map(|ex| oneshot_with_base(init, spec, ex, holdout, base))
                .collect::<Result<_>>()?
        }
        ScorerKind::OracleOneStep => {
            if holdout.is_empty() {
                return Err(Error::EmptyHoldout);
            }
            let base = evaluate_holdout(p, holdout, spec)?;
            dataset
                .examples()
                .par_iter()
                .map(|ex| one_step_with_base(p, spec, ex, holdout, cfg.oracle_lr, base))
                .collect::<Result<_>>()?
        }
    };
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Report(format!("non-finite score for example {i}")));
    }
    Ok(ScoreTable {
        entries: scores
            .into_iter()
            .map(|score| ScoreEntry {
                score,
                computed_at_step: step,
            })
            .collect(),
    })
}
