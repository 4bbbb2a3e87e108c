//! Deterministic synthetic corpora.
//!
//! Every prompt is a random string over the first `symbols` characters of the
//! vocabulary. A clean response is a fixed string transform of the prompt, so
//! correctness is machine-checkable. Two scenarios:
//!
//! * `Noise`: one transform (reversal); a fraction of the train set is
//!   corrupted and flagged. Holdout and test are clean.
//! * `Domain`: domain `g` uses transform `g`; train holds equal counts of every
//!   domain, holdout and test hold only the target domain.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Kind, Token, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Noise,
    Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Reverse,
    /// Cyclic shift left by one: `abc -> bca`.
    Shift,
    Sort,
    Duplicate,
    Identity,
}

impl Transform {
    pub const ALL: [Transform; 5] = [
        Transform::Reverse,
        Transform::Shift,
        Transform::Sort,
        Transform::Duplicate,
        Transform::Identity,
    ];

    pub fn apply(self, s: &[Token]) -> Vec<Token> {
        match self {
            Transform::Reverse => s.iter().rev().copied().collect(),
            Transform::Shift => {
                let mut out = s.to_vec();
                if !out.is_empty() {
                    out.rotate_left(1);
                }
                out
            }
            Transform::Sort => {
                let mut out = s.to_vec();
                out.sort_unstable();
                out
            }
            Transform::Duplicate => s.iter().chain(s.iter()).copied().collect(),
            Transform::Identity => s.to_vec(),
        }
    }

    pub fn for_domain(g: usize) -> Option<Transform> {
        Self::ALL.get(g).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub scenario: Scenario,
    pub n_train: usize,
    pub n_holdout: usize,
    pub n_test: usize,
    /// Fraction of train examples corrupted, in [0, 1].
    pub noise_rate: f64,
    /// Number of domains G (Domain scenario).
    pub n_domains: usize,
    pub target_domain: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Prompts draw from the first `symbols` characters of the alphabet.
    pub symbols: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Noise,
            n_train: 512,
            n_holdout: 64,
            n_test: 128,
            noise_rate: 0.3,
            n_domains: 4,
            target_domain: 0,
            min_len: 3,
            max_len: 6,
            symbols: 10,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let fail = |m: String| Err(Error::GenConfig(m));
        if !(0.0..=1.0).contains(&self.noise_rate) || self.noise_rate.is_nan() {
            return fail(format!("noise rate {} outside [0, 1]", self.noise_rate));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.symbols < 2 || self.symbols > vocab.n_chars() {
            return fail(format!(
                "symbols must be in [2, {}], got {}",
                vocab.n_chars(),
                self.symbols
            ));
        }
        if self.scenario == Scenario::Domain {
            if self.n_domains == 0 || self.n_domains > Transform::ALL.len() {
                return fail(format!(
                    "{} domains requested, only {} transforms available",
                    self.n_domains,
                    Transform::ALL.len()
                ));
            }
            if self.target_domain >= self.n_domains {
                return fail(format!(
                    "target domain {} not below domain count {}",
                    self.target_domain, self.n_domains
                ));
            }
            if !self.n_train.is_multiple_of(self.n_domains) {
                return fail(format!(
                    "train size {} not divisible by {} domains",
                    self.n_train, self.n_domains
                ));
            }
        }
        Ok(())
    }

    /// ⌊ρ·n⌋, with a small guard so that products like 0.3·200 land on 60.
    pub fn corrupted_count(&self) -> usize {
        ((self.noise_rate * self.n_train as f64) + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub holdout: Dataset,
    pub test: Dataset,
}

/// Replaces ⌈n/2⌉ randomly chosen characters, each with a different symbol.
pub fn corrupt<R: Rng + ?Sized>(response: &[Token], symbols: usize, rng: &mut R) -> Vec<Token> {
    let mut out = response.to_vec();
    let n = out.len();
    let m = n.div_ceil(2);
    for pos in sample(rng, n, m).into_vec() {
        let orig = out[pos];
        let mut r = rng.gen_range(0..symbols as Token - 1);
        if r >= orig {
            r += 1;
        }
        out[pos] = r;
    }
    out
}

struct Draft {
    prompt: Vec<Token>,
    clean: Vec<Token>,
    domain: Option<u32>,
}

fn random_prompt(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    (0..len)
        .map(|_| rng.gen_range(0..cfg.symbols as Token))
        .collect()
}

fn drafts(cfg: &GenConfig, rng: &mut ChaCha8Rng, n: usize, train: bool) -> Vec<Draft> {
    (0..n)
        .map(|i| {
            let (transform, domain) = match cfg.scenario {
                Scenario::Noise => (Transform::Reverse, None),
                Scenario::Domain => {
                    let g = if train { i % cfg.n_domains } else { cfg.target_domain };
                    (Transform::ALL[g], Some(g as u32))
                }
            };
            let prompt = random_prompt(cfg, rng);
            let clean = transform.apply(&prompt);
            Draft {
                prompt,
                clean,
                domain,
            }
        })
        .collect()
}

fn flagged(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut order: Vec<usize> = (0..cfg.n_train).collect();
    order.shuffle(rng);
    let mut flags = vec![false; cfg.n_train];
    for &i in &order[..cfg.corrupted_count()] {
        flags[i] = true;
    }
    flags
}

fn build_sft(cfg: &GenConfig, rng: &mut ChaCha8Rng, drafts: Vec<Draft>, flags: &[bool]) -> Result<Dataset> {
    let examples = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let bad = flags.get(i).copied().unwrap_or(false);
            let response = if bad {
                corrupt(&d.clean, cfg.symbols, rng)
            } else {
                d.clean
            };
            Ok(Example::sft(d.prompt, response)?
                .with_domain(d.domain)
                .with_corrupted(bad))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Kind::Sft, examples)
}

fn build_pref(cfg: &GenConfig, rng: &mut ChaCha8Rng, drafts: Vec<Draft>, flags: &[bool]) -> Result<Dataset> {
    let examples = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let bad = flags.get(i).copied().unwrap_or(false);
            let noisy = corrupt(&d.clean, cfg.symbols, rng);
            let (chosen, rejected) = if bad { (noisy, d.clean) } else { (d.clean, noisy) };
            Ok(Example::pref(d.prompt, chosen, rejected)?
                .with_domain(d.domain)
                .with_corrupted(bad))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Kind::Pref, examples)
}

fn generate(cfg: &GenConfig, seed: u64, vocab: &Vocab, kind: Kind) -> Result<Splits> {
    cfg.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = drafts(cfg, &mut rng, cfg.n_train, true);
    let holdout = drafts(cfg, &mut rng, cfg.n_holdout, false);
    let test = drafts(cfg, &mut rng, cfg.n_test, false);
    let flags = flagged(cfg, &mut rng);
    let build = match kind {
        Kind::Sft => build_sft,
        Kind::Pref => build_pref,
    };
    Ok(Splits {
        train: build(cfg, &mut rng, train, &flags)?,
        holdout: build(cfg, &mut rng, holdout, &[])?,
        test: build(cfg, &mut rng, test, &[])?,
    })
}

/// Instruction/response splits. A pure function of `(cfg, seed)`.
pub fn generate_synthetic_sft(cfg: &GenConfig, seed: u64, vocab: &Vocab) -> Result<Splits> {
    generate(cfg, seed, vocab, Kind::Sft)
}

/// Preference splits: chosen is the clean transform, rejected a corrupted copy;
/// flagged train pairs are swapped.
pub fn generate_synthetic_pref(cfg: &GenConfig, seed: u64, vocab: &Vocab) -> Result<Splits> {
    generate(cfg, seed, vocab, Kind::Pref)
}
