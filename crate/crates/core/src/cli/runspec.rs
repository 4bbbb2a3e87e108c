use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_synthetic_pref, generate_synthetic_sft, load_jsonl, GenConfig, Kind, Splits, Vocab, DEFAULT_ALPHABET,
};
use crate::error::{Error, Result};
use crate::model::{init_params, load_checkpoint, ModelConfig, ModelParams};
use crate::train::{pretrain_icl, PretrainConfig, TrainConfig};

pub const RUNSPEC_VERSION: u32 = 1;

/// Where datasets come from: a directory holding train/holdout/test JSONL,
/// or (when absent) the generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    #[default]
    OneStep,
    Retrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    pub mode: OracleMode,
    /// Optimizer steps of each retraining run.
    pub retrain_steps: usize,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            mode: OracleMode::OneStep,
            retrain_steps: 20,
        }
    }
}

/// A complete experiment description. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub alphabet: Option<String>,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub data: DataSpec,
    /// Start from this checkpoint instead of a fresh (optionally pretrained) init.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Per-component seeds, drawn in a fixed order from one generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub gen: u64,
    pub model: u64,
    pub pretrain: u64,
    pub train: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Self {
            gen: rng.next_u64(),
            model: rng.next_u64(),
            pretrain: rng.next_u64(),
            train: rng.next_u64(),
        }
    }
}

impl RunSpec {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec: RunSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.base_dir = base_dir.to_path_buf();
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &dir)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.alphabet.as_deref().unwrap_or(DEFAULT_ALPHABET))
    }

    pub fn data_kind(&self) -> Kind {
        self.train.loss.data_kind()
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUNSPEC_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {RUNSPEC_VERSION})",
                self.version
            )));
        }
        if self.model.seed != 0 || self.train.seed != 0 || self.pretrain.as_ref().is_some_and(|p| p.seed != 0) {
            return Err(Error::Config(
                "per-section seeds are derived from the top-level seed; set `seed` instead".into(),
            ));
        }
        let vocab = self.vocab()?;
        if vocab.size() != self.model.vocab {
            return Err(Error::Config(format!(
                "alphabet gives {} tokens but model.vocab is {}",
                vocab.size(),
                self.model.vocab
            )));
        }
        self.gen.validate(&vocab)?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate(self.model.vocab)?;
        }
        let longest = self.gen.max_len + 1 + 2 * self.gen.max_len;
        if longest > self.model.max_query_len() {
            return Err(Error::Config(format!(
                "queries up to {longest} tokens do not fit after query_offset {} in n_ctx {}",
                self.model.query_offset, self.model.n_ctx
            )));
        }
        if self.oracle.retrain_steps == 0 {
            return Err(Error::Config("oracle.retrain_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seeds().model,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().train,
            ..self.train.clone()
        }
    }

    pub fn generate(&self) -> Result<Splits> {
        let vocab = self.vocab()?;
        let seed = self.seeds().gen;
        match self.data_kind() {
            Kind::Sft => generate_synthetic_sft(&self.gen, seed, &vocab),
            Kind::Pref => generate_synthetic_pref(&self.gen, seed, &vocab),
        }
    }

    /// Datasets from `data.dir` when set, otherwise freshly generated.
    /// The flag tells whether they were generated.
    pub fn datasets(&self) -> Result<(Splits, bool)> {
        match &self.data.dir {
            Some(dir) => {
                let dir = self.resolve(dir);
                let vocab = self.vocab()?;
                let kind = self.data_kind();
                Ok((
                    Splits {
                        train: load_jsonl(&dir.join("train.jsonl"), kind, &vocab)?,
                        holdout: load_jsonl(&dir.join("holdout.jsonl"), kind, &vocab)?,
                        test: load_jsonl(&dir.join("test.jsonl"), kind, &vocab)?,
                    },
                    false,
                ))
            }
            None => Ok((self.generate()?, true)),
        }
    }

    /// The starting checkpoint: `init_checkpoint` if given, else a fresh init
    /// followed by in-context pretraining when configured.
    pub fn initial_params(&self) -> Result<ModelParams> {
        if let Some(path) = &self.init_checkpoint {
            let p = load_checkpoint(&self.resolve(path))?;
            if p.config().vocab != self.model.vocab {
                return Err(Error::Config("init checkpoint vocabulary differs from model.vocab".into()));
            }
            return Ok(p);
        }
        match &self.pretrain {
            Some(_) => Ok(self.pretrained()?.0),
            None => init_params(&self.model_config()),
        }
    }

    /// Fresh init followed by the configured pretraining, with per-step losses.
    pub fn pretrained(&self) -> Result<(ModelParams, Vec<f64>)> {
        let cfg = self
            .pretrain
            .as_ref()
            .ok_or_else(|| Error::Config("no [pretrain] section in the config".into()))?;
        let cfg = PretrainConfig {
            seed: self.seeds().pretrain,
            ..cfg.clone()
        };
        pretrain_icl(&init_params(&self.model_config())?, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_uses_defaults() {
        let s = RunSpec::from_toml("version = 1\n", Path::new(".")).unwrap();
        assert_eq!(s.train, TrainConfig::default());
        assert_eq!(s.gen, GenConfig::default());
        assert!(s.pretrain.is_none());
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(matches!(
            RunSpec::from_toml("version = 1\nbogus = 3\n", Path::new(".")),
            Err(Error::Config(_))
        ));
        assert!(RunSpec::from_toml("version = 1\n[train]\nstep = 3\n", Path::new(".")).is_err());
        assert!(RunSpec::from_toml("version = 2\n", Path::new(".")).is_err());
        assert!(RunSpec::from_toml("seed = 1\n", Path::new(".")).is_err());
    }

    #[test]
    fn rejects_section_seeds_and_bad_values() {
        assert!(RunSpec::from_toml("version = 1\n[model]\nseed = 4\n", Path::new(".")).is_err());
        assert!(RunSpec::from_toml("version = 1\n[train]\nlr = -1.0\n", Path::new(".")).is_err());
        assert!(RunSpec::from_toml("version = 1\n[gen]\nnoise_rate = 1.5\n", Path::new(".")).is_err());
    }

    #[test]
    fn nested_loss_and_weighting_tables() {
        let text = r#"
version = 1
seed = 9
[train]
steps = 10
[train.loss]
kind = "simpo"
beta = 2.5
gamma = 1.375
[train.weighting]
mode = "percentile"
p = 30.0
"#;
        let s = RunSpec::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(s.data_kind(), Kind::Pref);
        assert_eq!(s.train_config().seed, Seeds::derive(9).train);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = Seeds::derive(3);
        assert_eq!(a, Seeds::derive(3));
        assert_ne!(a, Seeds::derive(4));
        assert_ne!(a.gen, a.model);
    }
}
