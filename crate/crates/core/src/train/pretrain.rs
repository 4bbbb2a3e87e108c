//! In-context pretraining on freshly sampled transform tasks.
//!
//! Each sample draws a transform, up to `max_demos` demonstrations of it and a
//! query, and trains the demonstration-conditioned NLL of the query response.
//! The resulting checkpoint can infer the task from its context, which is what
//! makes conditioning on holdout demonstrations informative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{OptimizerKind, OptimizerState};
use crate::corpus::{Example, Token, Transform};
use crate::error::{Error, Result};
use crate::model::{serialize_query, token_nll_and_grad, Demo, DemoSet, Gradients, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup` steps and cosine-decayed
    /// to a tenth of itself by the last step.
    pub lr: f64,
    pub warmup: usize,
    pub max_demos: usize,
    /// Also train on every demonstration response, not only the query's.
    pub supervise_demos: bool,
    pub transforms: Vec<Transform>,
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            warmup: 100,
            max_demos: 4,
            supervise_demos: true,
            transforms: Transform::ALL.to_vec(),
            symbols: 10,
            min_len: 3,
            max_len: 6,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let fail = |m: String| Err(Error::TrainConfig(m));
        if self.steps == 0 || self.batch_size == 0 {
            return fail("pretraining needs at least one step and one sample per batch".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("pretraining learning rate {} must be positive", self.lr));
        }
        if self.transforms.is_empty() {
            return fail("pretraining needs at least one transform".into());
        }
        if self.symbols < 2 || self.symbols >= vocab {
            return fail(format!("pretraining symbols {} outside [2, {})", self.symbols, vocab - 1));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        Ok(())
    }
}

impl PretrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((step + 1) as f64 / self.warmup.max(1) as f64).min(1.0);
        let frac = step as f64 / self.steps.max(1) as f64;
        let decay = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * warm * decay
    }
}

struct Task {
    query: Example,
    demos: DemoSet,
}

fn random_string(cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let n = rng.gen_range(cfg.min_len..=cfg.max_len);
    (0..n).map(|_| rng.gen_range(0..cfg.symbols as Token)).collect()
}

fn sample_task(cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<Task> {
    let t = cfg.transforms[rng.gen_range(0..cfg.transforms.len())];
    let n_demos = rng.gen_range(0..=cfg.max_demos);
    let demos = (0..n_demos)
        .map(|i| {
            let prompt = random_string(cfg, rng);
            Demo {
                holdout_id: i,
                similarity: 0.0,
                response: t.apply(&prompt),
                prompt,
            }
        })
        .collect();
    let prompt = random_string(cfg, rng);
    Ok(Task {
        query: Example::sft(prompt.clone(), t.apply(&prompt))?,
        demos: DemoSet { demos },
    })
}

/// Loss summed over the supervised response tokens of one task.
fn task_loss(p: &ModelParams, t: &Task, supervise_demos: bool) -> Result<(f64, Gradients)> {
    let (x, y) = match &t.query.target {
        crate::corpus::Target::Sft { response } => (&t.query.prompt, response),
        crate::corpus::Target::Pref { .. } => unreachable!("tasks are SFT"),
    };
    let s = serialize_query(p.config(), &t.demos.demos, x, y)?;
    let mut targets = Vec::new();
    if supervise_demos {
        let mut o = 0;
        for d in &t.demos.demos[..s.used_demos] {
            o += d.prompt.len() + 1;
            targets.extend(o..o + d.response.len());
            o += d.response.len() + 1;
        }
    }
    targets.extend(s.y_start..s.tokens.len());
    token_nll_and_grad(p, &s.tokens, s.start_pos, &targets)
}

/// Adam on the mean conditional NLL of freshly sampled tasks. Returns the
/// trained parameters and the per-step mean loss.
pub fn pretrain_icl(init: &ModelParams, cfg: &PretrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate(init.config().vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = init.clone();
    let mut opt = OptimizerState::new(OptimizerKind::default(), &p);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tasks: Vec<Task> = (0..cfg.batch_size)
            .map(|_| sample_task(cfg, &mut rng))
            .collect::<Result<_>>()?;
        let per: Vec<(f64, Gradients)> = tasks
            .par_iter()
            .map(|t| task_loss(&p, t, cfg.supervise_demos))
            .collect::<Result<_>>()?;
        let mut g = Gradients::zeros_like(&p);
        let mut loss = 0.0;
        for (l, gi) in &per {
            loss += l;
            g.add(gi);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.scale(scale);
        opt.step(&mut p, &g, cfg.lr_at(step))?;
        losses.push(loss);
    }
    Ok((p, losses))
}
