//! Token-level data model, synthetic dataset generation and JSONL I/O.

mod generate;
mod jsonl;
mod vocab;

pub use generate::{
    corrupt, generate_synthetic_pref, generate_synthetic_sft, GenConfig, Scenario, Splits,
    Transform,
};
pub use jsonl::{load_jsonl, save_jsonl};
pub use vocab::{Token, Vocab, DEFAULT_ALPHABET};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Sft,
    Pref,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Sft => "sft",
            Kind::Pref => "pref",
        }
    }
}

/// Response side of an example: a single target, or a preference pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Sft { response: Vec<Token> },
    Pref { chosen: Vec<Token>, rejected: Vec<Token> },
}

/// One training unit. `corrupted` is generator metadata and is never read by scorers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<Token>,
    pub target: Target,
    pub domain: Option<u32>,
    pub corrupted: bool,
}

impl Example {
    pub fn sft(prompt: Vec<Token>, response: Vec<Token>) -> Result<Self> {
        let ex = Self {
            prompt,
            target: Target::Sft { response },
            domain: None,
            corrupted: false,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn pref(prompt: Vec<Token>, chosen: Vec<Token>, rejected: Vec<Token>) -> Result<Self> {
        let ex = Self {
            prompt,
            target: Target::Pref { chosen, rejected },
            domain: None,
            corrupted: false,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn with_domain(mut self, domain: Option<u32>) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_corrupted(mut self, corrupted: bool) -> Self {
        self.corrupted = corrupted;
        self
    }

    pub fn kind(&self) -> Kind {
        match self.target {
            Target::Sft { .. } => Kind::Sft,
            Target::Pref { .. } => Kind::Pref,
        }
    }

    /// The response shown when this example is used as a demonstration
    /// (SFT response, or the chosen side of a preference pair).
    pub fn demo_response(&self) -> &[Token] {
        match &self.target {
            Target::Sft { response } => response,
            Target::Pref { chosen, .. } => chosen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidExample("empty prompt".into()));
        }
        match &self.target {
            Target::Sft { response } if response.is_empty() => {
                Err(Error::InvalidExample("empty response".into()))
            }
            Target::Pref { chosen, rejected } if chosen.is_empty() || rejected.is_empty() => {
                Err(Error::InvalidExample("empty chosen or rejected response".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn validate_vocab(&self, vocab_size: usize) -> Result<()> {
        let all = self.prompt.iter().chain(match &self.target {
            Target::Sft { response } => response.iter().chain([].iter()),
            Target::Pref { chosen, rejected } => chosen.iter().chain(rejected.iter()),
        });
        for &id in all {
            if id as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Homogeneous, index-stable list of examples. Also used in the holdout role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    kind: Kind,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(kind: Kind, examples: Vec<Example>) -> Result<Self> {
        for ex in &examples {
            ex.validate()?;
            if ex.kind() != kind {
                return Err(Error::KindMismatch {
                    expected: kind.as_str(),
                    found: ex.kind().as_str(),
                });
            }
        }
        Ok(Self { kind, examples })
    }

    pub fn empty(kind: Kind) -> Self {
        Self {
            kind,
            examples: Vec::new(),
        }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Example> {
        self.examples.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// New dataset holding the examples at `ids`, in that order.
    pub fn subset(&self, ids: &[usize]) -> Self {
        Self {
            kind: self.kind,
            examples: ids.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn push(&mut self, ex: Example) -> Result<()> {
        ex.validate()?;
        if ex.kind() != self.kind {
            return Err(Error::KindMismatch {
                expected: self.kind.as_str(),
                found: ex.kind().as_str(),
            });
        }
        self.examples.push(ex);
        Ok(())
    }

    pub fn corrupted_count(&self) -> usize {
        self.examples.iter().filter(|e| e.corrupted).count()
    }
}
