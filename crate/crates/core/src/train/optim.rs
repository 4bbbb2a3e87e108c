use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 =>
            {
                Ok(())
            }
            other => Err(Error::TrainConfig(format!("invalid optimizer {other:?}"))),
        }
    }
}

/// Optimizer state. Adam moments share the parameter layout.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let n = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => params.data().len(),
        };
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, g: &Gradients, lr: f64) -> Result<()> {
        if g.len() != params.data().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient entries for {} parameters",
                g.len(),
                params.data().len()
            )));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => params.sgd_step(g, lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                let state = self.m.iter_mut().zip(self.v.iter_mut());
                for ((p, &gi), (m, v)) in params.data_mut().iter_mut().zip(g.data()).zip(state) {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
