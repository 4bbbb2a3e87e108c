use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase", deny_unknown_fields)]
pub enum MetricEvent {
    Header {
        seed: u64,
        n_train: usize,
        batch_size: usize,
        steps: usize,
        refreshes: usize,
        refresh_period: usize,
        eval_every: usize,
        scorer: String,
        weighting: String,
        loss: String,
    },
    Refresh {
        step: usize,
        score_min: f64,
        score_mean: f64,
        score_max: f64,
    },
    Step {
        step: usize,
        loss: f64,
        w_min: f64,
        w_mean: f64,
        w_max: f64,
    },
    Eval {
        step: usize,
        holdout: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<f64>,
    },
    Final {
        steps: usize,
        holdout: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint: Option<String>,
    },
}

/// Append-only event log of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub events: Vec<MetricEvent>,
}

impl RunMetrics {
    pub fn push(&mut self, e: MetricEvent) {
        self.events.push(e);
    }

    pub fn seed(&self) -> Option<u64> {
        self.events.iter().find_map(|e| match e {
            MetricEvent::Header { seed, .. } => Some(*seed),
            _ => None,
        })
    }

    pub fn refresh_steps(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                MetricEvent::Refresh { step, .. } => Some(*step),
                _ => None,
            })
            .collect()
    }

    /// (step, holdout, test) for every eval event.
    pub fn evals(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                MetricEvent::Eval { step, holdout, test } => Some((*step, *holdout, *test)),
                _ => None,
            })
            .collect()
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                MetricEvent::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn final_holdout(&self) -> Option<f64> {
        self.events.iter().rev().find_map(|e| match e {
            MetricEvent::Final { holdout, .. } => Some(*holdout),
            _ => None,
        })
    }

    pub fn set_checkpoint(&mut self, path: &str) {
        for e in self.events.iter_mut().rev() {
            if let MetricEvent::Final { checkpoint, .. } = e {
                *checkpoint = Some(path.to_string());
                return;
            }
        }
    }

    /// Replaces the header seed, e.g. with the run seed the training seed was
    /// derived from.
    pub fn set_seed(&mut self, value: u64) {
        if let Some(MetricEvent::Header { seed, .. }) = self.events.first_mut() {
            *seed = value;
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut events = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| Error::Jsonl {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Self { events })
    }

    /// Step indices must never decrease along the stream.
    pub fn check_monotone(&self) -> bool {
        let mut last = 0;
        for e in &self.events {
            let s = match e {
                MetricEvent::Header { .. } => continue,
                MetricEvent::Refresh { step, .. }
                | MetricEvent::Step { step, .. }
                | MetricEvent::Eval { step, .. } => *step,
                MetricEvent::Final { steps, .. } => *steps,
            };
            if s < last {
                return false;
            }
            last = s;
        }
        true
    }
}
