//! Score-reweighted fine-tuning with periodic score refresh, plus the
//! standard-training control, holdout evaluation and greedy selection.

mod metrics;
mod optim;
mod pretrain;

pub use metrics::{MetricEvent, RunMetrics};
pub use optim::{OptimizerKind, OptimizerState};
pub use pretrain::{pretrain_icl, PretrainConfig};

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::embed::{build_index, EmbedIndex};
use crate::error::{Error, Result};
use crate::model::{example_loss, loss_and_grad, Gradients, LossKind, LossSpec, ModelParams};
use crate::reweight::{weight_stats, weighted_gradient, WeightingMode};
use crate::score::{score_dataset, AuxCheckpoints, ScoreConfig, ScorerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps T.
    pub steps: usize,
    pub batch_size: usize,
    /// Score refreshes R over one pass of the data.
    pub refreshes: usize,
    /// kNN demonstrations per candidate.
    pub k: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub scorer: ScorerKind,
    pub weighting: WeightingMode,
    pub loss: LossKind,
    pub seed: u64,
    /// Holdout/test evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Divide the weighted gradient sum by the batch size.
    pub mean_normalize: bool,
    /// Step size of the one-step oracle scorer.
    pub oracle_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            refreshes: 1,
            k: 3,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            scorer: ScorerKind::Ica,
            weighting: WeightingMode::Maxmin,
            loss: LossKind::Sft,
            seed: 0,
            eval_every: 100,
            mean_normalize: true,
            oracle_lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::TrainConfig(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.refreshes == 0 {
            return fail("refreshes must be at least 1".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !self.oracle_lr.is_finite() || self.oracle_lr < 0.0 {
            return fail(format!("oracle learning rate {} must be non-negative", self.oracle_lr));
        }
        self.optimizer.validate()?;
        self.weighting.validate()?;
        self.loss.validate()
    }

    /// Loss spec for a run starting at `init`; DPO freezes `init` as the reference.
    pub fn loss_spec(&self, init: &ModelParams) -> Result<LossSpec> {
        let reference = match self.loss {
            LossKind::Dpo { .. } => Some(Arc::new(init.clone())),
            _ => None,
        };
        LossSpec::new(self.loss, reference)
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            kind: self.scorer,
            k: self.k,
            oracle_lr: self.oracle_lr,
        }
    }
}

/// F = max(1, ⌊n / (n_B·R)⌋).
pub fn refresh_period(n: usize, batch_size: usize, refreshes: usize) -> usize {
    (n / (batch_size * refreshes).max(1)).max(1)
}

/// Steps t in [0, T) with t mod F = 0.
pub fn refresh_schedule(n: usize, batch_size: usize, refreshes: usize, steps: usize) -> Vec<usize> {
    let f = refresh_period(n, batch_size, refreshes);
    (0..steps).step_by(f).collect()
}

/// Seeded epoch shuffling without replacement: every index appears once per
/// epoch, and a batch that crosses an epoch boundary continues into a fresh
/// permutation.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: (0..n).collect(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.perm.sort_unstable();
        self.perm.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.reshuffle();
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Arithmetic mean of per-example (unconditional) losses.
pub fn evaluate_holdout(p: &ModelParams, dataset: &Dataset, spec: &LossSpec) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    if dataset.kind() != spec.data_kind() {
        return Err(Error::KindMismatch {
            expected: spec.data_kind().as_str(),
            found: dataset.kind().as_str(),
        });
    }
    let losses: Vec<f64> = dataset
        .examples()
        .par_iter()
        .map(|ex| example_loss(p, spec, ex, None))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_kinds(spec: &LossSpec, sets: &[&Dataset]) -> Result<()> {
    for d in sets {
        if d.kind() != spec.data_kind() {
            return Err(Error::KindMismatch {
                expected: spec.data_kind().as_str(),
                found: d.kind().as_str(),
            });
        }
    }
    Ok(())
}

fn weighting_label(w: &WeightingMode) -> String {
    match w {
        WeightingMode::Maxmin => "maxmin".into(),
        WeightingMode::Softmax { temperature } => format!("softmax(temperature={temperature})"),
        WeightingMode::Percentile { p, full_dataset } => {
            format!("percentile(p={p}{})", if *full_dataset { ",full" } else { "" })
        }
        WeightingMode::Uniform => "uniform".into(),
        WeightingMode::Zero => "zero".into(),
    }
}

fn loss_label(l: &LossKind) -> String {
    match l {
        LossKind::Sft => "sft".into(),
        LossKind::Dpo { beta } => format!("dpo(beta={beta})"),
        LossKind::Simpo { beta, gamma } => format!("simpo(beta={beta},gamma={gamma})"),
    }
}

/// Per-example losses and gradients of a batch, in batch order.
fn batch_grads(p: &ModelParams, spec: &LossSpec, data: &Dataset, ids: &[usize]) -> Result<Vec<(f64, Gradients)>> {
    ids.par_iter()
        .map(|&i| loss_and_grad(p, spec, &data.examples()[i], None))
        .collect()
}

struct Scoring<'a> {
    index: Option<EmbedIndex>,
    aux: AuxCheckpoints,
    holdout: &'a Dataset,
}

fn eval_event(p: &ModelParams, step: usize, holdout: &Dataset, test: Option<&Dataset>, spec: &LossSpec) -> Result<MetricEvent> {
    Ok(MetricEvent::Eval {
        step,
        holdout: evaluate_holdout(p, holdout, spec)?,
        test: test.map(|t| evaluate_holdout(p, t, spec)).transpose()?,
    })
}

fn run(
    train: &Dataset,
    holdout: &Dataset,
    test: Option<&Dataset>,
    init: &ModelParams,
    cfg: &TrainConfig,
    scoring: Option<Scoring<'_>>,
) -> Result<(ModelParams, RunMetrics)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::TrainConfig("empty training set".into()));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::TrainConfig(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train.len()
        )));
    }
    let spec = cfg.loss_spec(init)?;
    check_kinds(&spec, &[train, holdout])?;
    if let Some(t) = test {
        check_kinds(&spec, &[t])?;
    }
    let n = train.len();
    let period = refresh_period(n, cfg.batch_size, cfg.refreshes);
    let mut metrics = RunMetrics::default();
    metrics.push(MetricEvent::Header {
        seed: cfg.seed,
        n_train: n,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        refreshes: cfg.refreshes,
        refresh_period: period,
        eval_every: cfg.eval_every,
        scorer: if scoring.is_some() { cfg.scorer.as_str().into() } else { "none".into() },
        weighting: if scoring.is_some() { weighting_label(&cfg.weighting) } else { "none".into() },
        loss: loss_label(&cfg.loss),
    });

    let mut p = init.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &p);
    let mut sampler = EpochSampler::new(n, cfg.seed);
    let score_cfg = cfg.score_config();
    let mut scores: Vec<f64> = Vec::new();

    for t in 0..cfg.steps {
        if let Some(s) = &scoring {
            if t % period == 0 {
                let index = s.index.as_ref().expect("index built for scoring runs");
                let table = score_dataset(&p, &spec, train, s.holdout, &score_cfg, index, &s.aux, t)?;
                scores = table.scores();
                let (lo, mean, hi) = weight_stats(&scores);
                metrics.push(MetricEvent::Refresh {
                    step: t,
                    score_min: lo,
                    score_mean: mean,
                    score_max: hi,
                });
            }
        }
        if cfg.eval_every > 0 && t % cfg.eval_every == 0 {
            metrics.push(eval_event(&p, t, holdout, test, &spec)?);
        }
        let ids = sampler.next_batch(cfg.batch_size);
        let per_example = batch_grads(&p, &spec, train, &ids)?;
        let loss = per_example.iter().map(|(l, _)| l).sum::<f64>() / ids.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }
        let grads: Vec<Gradients> = per_example.into_iter().map(|(_, g)| g).collect();
        let (g, w) = if scoring.is_some() {
            let batch_scores: Vec<f64> = ids.iter().map(|&i| scores[i]).collect();
            let w = cfg.weighting.weights(&batch_scores, &scores)?;
            (weighted_gradient(&w, &grads, cfg.mean_normalize)?, weight_stats(&w))
        } else {
            let mut g = grads[0].clone();
            for other in &grads[1..] {
                g.add(other);
            }
            if cfg.mean_normalize {
                g.scale(1.0 / grads.len() as f64);
            }
            (g, (1.0, 1.0, 1.0))
        };
        opt.step(&mut p, &g, cfg.lr)?;
        if !p.all_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }
        metrics.push(MetricEvent::Step {
            step: t,
            loss,
            w_min: w.0,
            w_mean: w.1,
            w_max: w.2,
        });
    }

    let last = eval_event(&p, cfg.steps, holdout, test, &spec)?;
    if let MetricEvent::Eval { holdout, test, .. } = last {
        metrics.push(last.clone());
        metrics.push(MetricEvent::Final {
            steps: cfg.steps,
            holdout,
            test,
            checkpoint: None,
        });
    }
    Ok((p, metrics))
}

/// Reweighted training. Scores are refreshed over the full train set on the
/// refresh schedule and reused between refreshes; weights come from the
/// stored raw scores of each batch. RHO needs `aux.rho_reference`; the
/// one-shot scorer pins `init` as θ_0 unless `aux.initial` is given.
pub fn train(
    train: &Dataset,
    holdout: &Dataset,
    test: Option<&Dataset>,
    init: &ModelParams,
    cfg: &TrainConfig,
    aux: &AuxCheckpoints,
) -> Result<(ModelParams, RunMetrics)> {
    let mut aux = aux.clone();
    if cfg.scorer == ScorerKind::OneShot && aux.initial.is_none() {
        aux.initial = Some(Arc::new(init.clone()));
    }
    if cfg.scorer == ScorerKind::Rho && aux.rho_reference.is_none() {
        return Err(Error::MissingCheckpoint("RHO reference"));
    }
    let index = build_index(holdout, init.config().vocab)?;
    run(
        train,
        holdout,
        test,
        init,
        cfg,
        Some(Scoring {
            index: Some(index),
            aux,
            holdout,
        }),
    )
}

/// Standard training: the same loop with no scoring and unit weights.
pub fn train_standard(
    train: &Dataset,
    holdout: &Dataset,
    test: Option<&Dataset>,
    init: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, RunMetrics)> {
    run(train, holdout, test, init, cfg, None)
}

/// θ*(D_ho): standard training on the holdout set alone, for RHO scoring.
pub fn train_rho_reference(holdout: &Dataset, init: &ModelParams, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut cfg = cfg.clone();
    cfg.batch_size = cfg.batch_size.min(holdout.len().max(1));
    cfg.eval_every = 0;
    Ok(train_standard(holdout, holdout, None, init, &cfg)?.0)
}

/// Greedy selection: `m` rounds of scoring every remaining candidate at the
/// current parameters, taking the argmax (ties to the lowest id) and training
/// one optimizer step on it alone.
pub fn greedy_select(
    train: &Dataset,
    holdout: &Dataset,
    init: &ModelParams,
    m: usize,
    cfg: &TrainConfig,
    aux: &AuxCheckpoints,
) -> Result<Vec<usize>> {
    if m > train.len() {
        return Err(Error::TrainConfig(format!("cannot select {m} of {} examples", train.len())));
    }
    let spec = cfg.loss_spec(init)?;
    check_kinds(&spec, &[train, holdout])?;
    let mut aux = aux.clone();
    if aux.initial.is_none() {
        aux.initial = Some(Arc::new(init.clone()));
    }
    let index = build_index(holdout, init.config().vocab)?;
    let score_cfg = cfg.score_config();
    let mut p = init.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &p);
    let mut remaining: Vec<usize> = (0..train.len()).collect();
    let mut order = Vec::with_capacity(m);
    for round in 0..m {
        let cand = train.subset(&remaining);
        let scores = score_dataset(&p, &spec, &cand, holdout, &score_cfg, &index, &aux, round)?.scores();
        let mut best = 0;
        for j in 1..scores.len() {
            if scores[j] > scores[best] {
                best = j;
            }
        }
        let id = remaining.remove(best);
        order.push(id);
        let (_, g) = loss_and_grad(&p, &spec, &train.examples()[id], None)?;
        opt.step(&mut p, &g, cfg.lr)?;
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_sft, GenConfig, Vocab};
    use crate::model::{init_params, nll_loss, ModelConfig};

    fn small_model(layers: usize) -> ModelParams {
        init_params(&ModelConfig {
            d_model: 16,
            n_layers: layers,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn data(n: usize) -> crate::corpus::Splits {
        let cfg = GenConfig {
            n_train: n,
            n_holdout: 8,
            n_test: 8,
            ..GenConfig::default()
        };
        generate_synthetic_sft(&cfg, 11, &Vocab::default()).unwrap()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            eval_every: 2,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(refresh_schedule(100, 10, 2, 10), vec![0, 5]);
        assert_eq!(refresh_schedule(100, 10, 1, 10), vec![0]);
        assert_eq!(refresh_period(7, 8, 3), 1);
        assert_eq!(refresh_schedule(7, 8, 3, 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(4)).collect();
        let first: Vec<usize> = {
            let mut e = seen[..10].to_vec();
            e.sort_unstable();
            e
        };
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        seen[10..20].sort_unstable();
        assert_eq!(&seen[10..20], &(0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn evaluate_holdout_is_mean() {
        let s = data(8);
        let p = small_model(1);
        let spec = LossSpec::sft();
        let single = s.holdout.subset(&[2]);
        let ex = single.get(0).unwrap();
        let own = example_loss(&p, &spec, ex, None).unwrap();
        assert_eq!(evaluate_holdout(&p, &single, &spec).unwrap(), own);
        let manual: f64 = s
            .holdout
            .iter()
            .map(|e| match &e.target {
                crate::corpus::Target::Sft { response } => nll_loss(&p, &e.prompt, response).unwrap(),
                _ => unreachable!(),
            })
            .sum::<f64>()
            / s.holdout.len() as f64;
        assert!((evaluate_holdout(&p, &s.holdout, &spec).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_length_times_ln_v() {
        let p = ModelParams::zeros(&ModelConfig {
            d_model: 8,
            n_layers: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let ds = Dataset::new(
            crate::corpus::Kind::Sft,
            (0..4)
                .map(|i| crate::corpus::Example::sft(vec![i, 1], vec![1, 2, 3, 4, i]).unwrap())
                .collect(),
        )
        .unwrap();
        let v = evaluate_holdout(&p, &ds, &LossSpec::sft()).unwrap();
        assert!((v - 5.0 * 32f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn uniform_weighting_matches_standard_training() {
        let s = data(16);
        let p = small_model(1);
        let cfg = TrainConfig {
            weighting: WeightingMode::Uniform,
            ..quick(6)
        };
        let (a, ma) = train(&s.train, &s.holdout, Some(&s.test), &p, &cfg, &AuxCheckpoints::default()).unwrap();
        let (b, mb) = train_standard(&s.train, &s.holdout, Some(&s.test), &p, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ma.evals(), mb.evals());
        assert_eq!(ma.step_losses(), mb.step_losses());
    }

    #[test]
    fn zero_weights_leave_sgd_params_unchanged() {
        let s = data(16);
        let p = small_model(1);
        let cfg = TrainConfig {
            weighting: WeightingMode::Zero,
            optimizer: OptimizerKind::Sgd,
            ..quick(4)
        };
        let (a, _) = train(&s.train, &s.holdout, None, &p, &cfg, &AuxCheckpoints::default()).unwrap();
        assert_eq!(a, p);
    }

    #[test]
    fn refresh_events_follow_schedule() {
        let s = data(16);
        let p = small_model(1);
        let cfg = TrainConfig { refreshes: 2, ..quick(7) };
        let (_, m) = train(&s.train, &s.holdout, None, &p, &cfg, &AuxCheckpoints::default()).unwrap();
        assert_eq!(m.refresh_steps(), refresh_schedule(16, 4, 2, 7));
        assert_eq!(m.refresh_steps(), vec![0, 2, 4, 6]);
        assert!(m.check_monotone());
        let evals: Vec<usize> = m.evals().iter().map(|e| e.0).collect();
        assert_eq!(evals, vec![0, 2, 4, 6, 7]);
    }

    #[test]
    fn deterministic_runs() {
        let s = data(16);
        let p = small_model(1);
        let cfg = quick(5);
        let (a, ma) = train(&s.train, &s.holdout, None, &p, &cfg, &AuxCheckpoints::default()).unwrap();
        let (b, mb) = train(&s.train, &s.holdout, None, &p, &cfg, &AuxCheckpoints::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.to_jsonl().unwrap(), mb.to_jsonl().unwrap());
    }

    #[test]
    fn config_errors() {
        let s = data(16);
        let p = small_model(1);
        let big = TrainConfig { batch_size: 17, ..quick(2) };
        assert!(matches!(
            train_standard(&s.train, &s.holdout, None, &p, &big),
            Err(Error::TrainConfig(_))
        ));
        let rho = TrainConfig { scorer: ScorerKind::Rho, ..quick(2) };
        assert!(matches!(
            train(&s.train, &s.holdout, None, &p, &rho, &AuxCheckpoints::default()),
            Err(Error::MissingCheckpoint(_))
        ));
        let pref = TrainConfig {
            loss: LossKind::Simpo { beta: 2.0, gamma: 0.5 },
            ..quick(2)
        };
        assert!(matches!(
            train_standard(&s.train, &s.holdout, None, &p, &pref),
            Err(Error::KindMismatch { .. })
        ));
    }

    #[test]
    fn huge_learning_rate_aborts_with_step() {
        let s = data(16);
        let p = small_model(1);
        let cfg = TrainConfig {
            lr: 1e200,
            optimizer: OptimizerKind::Sgd,
            ..quick(5)
        };
        match train_standard(&s.train, &s.holdout, None, &p, &cfg) {
            Err(Error::NonFiniteLoss { step }) => assert!(step < 5),
            other => panic!("expected abort, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn greedy_select_edges() {
        let s = data(6);
        let p = small_model(1);
        let cfg = quick(1);
        assert!(greedy_select(&s.train, &s.holdout, &p, 0, &cfg, &AuxCheckpoints::default())
            .unwrap()
            .is_empty());
        let mut all = greedy_select(&s.train, &s.holdout, &p, 6, &cfg, &AuxCheckpoints::default()).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(greedy_select(&s.train, &s.holdout, &p, 7, &cfg, &AuxCheckpoints::default()).is_err());
    }
}
