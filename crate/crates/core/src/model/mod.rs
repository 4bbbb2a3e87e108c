//! Tiny pre-norm decoder-only transformer with hand-written reverse-mode
//! differentiation, plus the SFT / DPO / SimPO losses built on it.
//!
//! All parameters live in one flat `f64` buffer; [`Layout`] maps names to
//! ranges. Gradients share the same layout, so optimizers and weighted sums
//! work on plain slices.

mod checkpoint;
mod loss;
mod serialize;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use loss::{
    conditional_nll_loss, dpo_loss, example_loss, loss_and_grad, nll_loss, simpo_loss, LossKind,
    LossSpec,
};
pub use serialize::{serialize_query, Demo, DemoSet, Serialized};
pub use transformer::forward_logits;
pub(crate) use loss::token_nll_and_grad;
pub(crate) use transformer::{backward, forward, Trace};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_ctx: usize,
    /// Absolute position of the first query token. Demonstrations fill the
    /// positions right before it, so a query always sees the same position ids
    /// with or without context.
    pub query_offset: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            n_ctx: 256,
            query_offset: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ModelConfig(m));
        if self.vocab < 2 {
            return fail(format!("vocab {} < 2", self.vocab));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_ctx == 0 || self.query_offset >= self.n_ctx {
            return fail(format!(
                "query offset {} must be below n_ctx {}",
                self.query_offset, self.n_ctx
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest query (prompt, separator, response) that fits after the offset.
    pub fn max_query_len(&self) -> usize {
        self.n_ctx - self.query_offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Named tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub(crate) tok: usize,
    pub(crate) pos: usize,
    pub(crate) layers: Vec<LayerLayout>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, n) = (cfg.vocab, cfg.d_model, cfg.n_ctx);
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset
        };
        let tok = add("tok_emb".into(), vec![v, d]);
        let pos = add("pos_emb".into(), vec![n, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut t = |s: &str, shape: Vec<usize>| add(format!("layer{l}.{s}"), shape);
                LayerLayout {
                    ln1_g: t("ln1.scale", vec![d]),
                    ln1_b: t("ln1.shift", vec![d]),
                    wq: t("attn.wq", vec![d, d]),
                    bq: t("attn.bq", vec![d]),
                    wk: t("attn.wk", vec![d, d]),
                    bk: t("attn.bk", vec![d]),
                    wv: t("attn.wv", vec![d, d]),
                    bv: t("attn.bv", vec![d]),
                    wo: t("attn.wo", vec![d, d]),
                    bo: t("attn.bo", vec![d]),
                    ln2_g: t("ln2.scale", vec![d]),
                    ln2_b: t("ln2.shift", vec![d]),
                    w1: t("mlp.w1", vec![d, 4 * d]),
                    b1: t("mlp.b1", vec![4 * d]),
                    w2: t("mlp.w2", vec![4 * d, d]),
                    b2: t("mlp.b2", vec![d]),
                }
            })
            .collect();
        let lnf_g = add("lnf.scale".into(), vec![d]);
        let lnf_b = add("lnf.shift".into(), vec![d]);
        let w_out = add("w_out".into(), vec![d, v]);
        Self {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            specs,
            total,
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    fn is_norm_scale(name: &str) -> bool {
        name.ends_with(".scale")
    }

    fn is_bias_or_shift(name: &str) -> bool {
        name.ends_with(".shift") || name.contains(".b")
    }
}

/// All weights of the model: the θ of every loss.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        let data = vec![0.0; layout.total()];
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.spec(name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.spec(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.config.vocab != other.config.vocab
            || self.layout.total() != other.layout.total()
            || self.config.n_layers != other.config.n_layers
            || self.config.d_model != other.config.d_model
        {
            return Err(Error::ShapeMismatch(
                "parameter sets have different shapes".into(),
            ));
        }
        Ok(())
    }

    /// θ ← θ − lr·g
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.data.iter_mut().zip(&grads.data) {
            *p -= lr * g;
        }
    }
}

/// Deterministic initialization: N(0, 0.02²) weights and embeddings, zero
/// biases, unit norm scales.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let specs = p.layout.specs().to_vec();
    for spec in specs {
        let fill = &mut p.data[spec.range()];
        if Layout::is_norm_scale(&spec.name) {
            fill.fill(1.0);
        } else if Layout::is_bias_or_shift(&spec.name) {
            fill.fill(0.0);
        } else {
            for x in fill.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        }
    }
    Ok(p)
}

/// Gradient buffer, shape-congruent with the [`ModelParams`] it differentiates.
#[derive(Debug, Clone)]
pub struct Gradients {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl PartialEq for Gradients {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layout: params.layout.clone(),
            data: vec![0.0; params.data.len()],
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.spec(name).map(|s| &self.data[s.range()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_congruent(&self, other: &Gradients) -> bool {
        self.data.len() == other.data.len() && *self.layout == *other.layout
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    /// self += s·other
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}
