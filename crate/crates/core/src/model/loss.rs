//! Sequence log-probabilities and the SFT / DPO / SimPO objectives.
//!
//! Everything is computed in log space; only response positions contribute.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{backward, forward, serialize_query, Demo, DemoSet, Gradients, ModelParams, Trace};
use crate::corpus::{Example, Kind, Target, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossKind {
    Sft,
    Dpo { beta: f64 },
    Simpo { beta: f64, gamma: f64 },
}

impl LossKind {
    pub fn data_kind(&self) -> Kind {
        match self {
            LossKind::Sft => Kind::Sft,
            _ => Kind::Pref,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Sft => Ok(()),
            LossKind::Dpo { beta } if beta > 0.0 && beta.is_finite() => Ok(()),
            LossKind::Simpo { beta, gamma } if beta > 0.0 && beta.is_finite() && gamma >= 0.0 && gamma.is_finite() => Ok(()),
            other => Err(Error::LossSpec(format!("invalid hyperparameters in {other:?}"))),
        }
    }
}

/// Loss kind plus the frozen reference policy DPO needs.
#[derive(Debug, Clone)]
pub struct LossSpec {
    kind: LossKind,
    reference: Option<Arc<ModelParams>>,
}

impl LossSpec {
    pub fn new(kind: LossKind, reference: Option<Arc<ModelParams>>) -> Result<Self> {
        kind.validate()?;
        match (&kind, &reference) {
            (LossKind::Dpo { .. }, None) => Err(Error::LossSpec("DPO requires a reference policy".into())),
            (LossKind::Sft | LossKind::Simpo { .. }, Some(_)) => {
                Err(Error::LossSpec("only DPO takes a reference policy".into()))
            }
            _ => Ok(Self { kind, reference }),
        }
    }

    pub fn sft() -> Self {
        Self {
            kind: LossKind::Sft,
            reference: None,
        }
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn reference(&self) -> Option<&Arc<ModelParams>> {
        self.reference.as_ref()
    }

    pub fn data_kind(&self) -> Kind {
        self.kind.data_kind()
    }

    fn check(&self, ex: &Example) -> Result<()> {
        if ex.kind() != self.data_kind() {
            return Err(Error::LossSpec(format!(
                "{:?} loss cannot score a {} example",
                self.kind,
                ex.kind().as_str()
            )));
        }
        Ok(())
    }
}

/// One teacher-forced pass over `demos ⊕ x ⊕ SEP ⊕ y`.
struct SeqPass {
    trace: Trace,
    /// Softmax rows for the positions that predict y.
    probs: Vec<f64>,
    targets: Vec<Token>,
    logp: f64,
}

impl SeqPass {
    fn run(p: &ModelParams, demos: &[Demo], x: &[Token], y: &[Token]) -> Result<Self> {
        let s = serialize_query(p.config(), demos, x, y)?;
        let trace = forward(p, &s.tokens, s.start_pos, s.y_start - 1)?;
        let v = p.config().vocab;
        let mut probs = vec![0.0; y.len() * v];
        let mut logp = 0.0;
        for (r, (&tgt, pr)) in y.iter().zip(probs.chunks_exact_mut(v)).enumerate() {
            let z = &trace.logits[r * v..][..v];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (pi, &zi) in pr.iter_mut().zip(z) {
                *pi = (zi - m).exp();
                sum += *pi;
            }
            logp += z[tgt as usize] - m - sum.ln();
            for pi in pr.iter_mut() {
                *pi /= sum;
            }
        }
        Ok(Self {
            trace,
            probs,
            targets: y.to_vec(),
            logp,
        })
    }

    /// grads += coef · ∇ log π(y | ·)
    fn backprop(&self, p: &ModelParams, coef: f64, grads: &mut Gradients) {
        let v = p.config().vocab;
        let mut dl = vec![0.0; self.trace.logits.len()];
        for (r, &tgt) in self.targets.iter().enumerate() {
            let row = &mut dl[r * v..][..v];
            for (d, &pi) in row.iter_mut().zip(&self.probs[r * v..][..v]) {
                *d = -coef * pi;
            }
            row[tgt as usize] += coef;
        }
        backward(p, &self.trace, &dl, grads);
    }
}

fn seq_logprob(p: &ModelParams, demos: &[Demo], x: &[Token], y: &[Token]) -> Result<f64> {
    Ok(SeqPass::run(p, demos, x, y)?.logp)
}

/// Teacher-forced NLL of `tokens[j]` for every `j` in `targets` (each ≥ 1),
/// with its gradient. The sequence starts at absolute position `start_pos`.
pub(crate) fn token_nll_and_grad(
    p: &ModelParams,
    tokens: &[Token],
    start_pos: usize,
    targets: &[usize],
) -> Result<(f64, Gradients)> {
    let from = match targets.iter().min() {
        Some(&j) if j >= 1 && targets.iter().all(|&t| t < tokens.len()) => j - 1,
        _ => return Err(Error::EmptySequence),
    };
    let trace = forward(p, tokens, start_pos, from)?;
    let v = p.config().vocab;
    let mut dl = vec![0.0; trace.logits.len()];
    let mut nll = 0.0;
    for &j in targets {
        let r = j - 1 - from;
        let z = &trace.logits[r * v..][..v];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|zi| (zi - m).exp()).sum();
        let tgt = tokens[j] as usize;
        nll -= z[tgt] - m - sum.ln();
        let row = &mut dl[r * v..][..v];
        for (d, &zi) in row.iter_mut().zip(z) {
            *d += (zi - m).exp() / sum;
        }
        row[tgt] -= 1.0;
    }
    let mut grads = Gradients::zeros_like(p);
    backward(p, &trace, &dl, &mut grads);
    Ok((nll, grads))
}

/// −log σ(m), evaluated without overflow.
fn neg_log_sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// σ(−m)
fn sigmoid_neg(m: f64) -> f64 {
    if m >= 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

/// −log π(y | x), summed over response tokens.
pub fn nll_loss(p: &ModelParams, x: &[Token], y: &[Token]) -> Result<f64> {
    Ok(-seq_logprob(p, &[], x, y)?)
}

/// −log π(y | demos, x). With no demos this is bit-identical to [`nll_loss`].
pub fn conditional_nll_loss(p: &ModelParams, demos: &DemoSet, x: &[Token], y: &[Token]) -> Result<f64> {
    Ok(-seq_logprob(p, &demos.demos, x, y)?)
}

pub fn dpo_loss(
    p: &ModelParams,
    reference: &ModelParams,
    x: &[Token],
    y_w: &[Token],
    y_l: &[Token],
    beta: f64,
) -> Result<f64> {
    LossKind::Dpo { beta }.validate()?;
    p.check_congruent(reference)?;
    let m = beta
        * ((seq_logprob(p, &[], x, y_w)? - seq_logprob(reference, &[], x, y_w)?)
            - (seq_logprob(p, &[], x, y_l)? - seq_logprob(reference, &[], x, y_l)?));
    Ok(neg_log_sigmoid(m))
}

pub fn simpo_loss(p: &ModelParams, x: &[Token], y_w: &[Token], y_l: &[Token], beta: f64, gamma: f64) -> Result<f64> {
    LossKind::Simpo { beta, gamma }.validate()?;
    let m = beta / y_w.len() as f64 * seq_logprob(p, &[], x, y_w)?
        - beta / y_l.len() as f64 * seq_logprob(p, &[], x, y_l)?
        - gamma;
    Ok(neg_log_sigmoid(m))
}

/// Scalar loss of one example, optionally with the policy conditioned on
/// demonstrations. For DPO the reference term is always unconditional.
pub fn example_loss(p: &ModelParams, spec: &LossSpec, ex: &Example, demos: Option<&DemoSet>) -> Result<f64> {
    spec.check(ex)?;
    let demos = demos.map(|d| d.demos.as_slice()).unwrap_or(&[]);
    match (&ex.target, spec.kind) {
        (Target::Sft { response }, LossKind::Sft) => Ok(-seq_logprob(p, demos, &ex.prompt, response)?),
        (Target::Pref { chosen, rejected }, LossKind::Dpo { beta }) => {
            let r = spec.reference.as_deref().expect("validated");
            p.check_congruent(r)?;
            let m = beta
                * ((seq_logprob(p, demos, &ex.prompt, chosen)? - seq_logprob(r, &[], &ex.prompt, chosen)?)
                    - (seq_logprob(p, demos, &ex.prompt, rejected)? - seq_logprob(r, &[], &ex.prompt, rejected)?));
            Ok(neg_log_sigmoid(m))
        }
        (Target::Pref { chosen, rejected }, LossKind::Simpo { beta, gamma }) => {
            let m = beta / chosen.len() as f64 * seq_logprob(p, demos, &ex.prompt, chosen)?
                - beta / rejected.len() as f64 * seq_logprob(p, demos, &ex.prompt, rejected)?
                - gamma;
            Ok(neg_log_sigmoid(m))
        }
        _ => unreachable!("kind checked"),
    }
}

/// Loss of one example and its exact gradient with respect to `p` (never
/// with respect to a DPO reference).
pub fn loss_and_grad(
    p: &ModelParams,
    spec: &LossSpec,
    ex: &Example,
    demos: Option<&DemoSet>,
) -> Result<(f64, Gradients)> {
    spec.check(ex)?;
    let demos = demos.map(|d| d.demos.as_slice()).unwrap_or(&[]);
    let mut grads = Gradients::zeros_like(p);
    let loss = match (&ex.target, spec.kind) {
        (Target::Sft { response }, LossKind::Sft) => {
            let pass = SeqPass::run(p, demos, &ex.prompt, response)?;
            pass.backprop(p, -1.0, &mut grads);
            -pass.logp
        }
        (Target::Pref { chosen, rejected }, LossKind::Dpo { beta }) => {
            let r = spec.reference.as_deref().expect("validated");
            p.check_congruent(r)?;
            let w = SeqPass::run(p, demos, &ex.prompt, chosen)?;
            let l = SeqPass::run(p, demos, &ex.prompt, rejected)?;
            let m = beta
                * ((w.logp - seq_logprob(r, &[], &ex.prompt, chosen)?)
                    - (l.logp - seq_logprob(r, &[], &ex.prompt, rejected)?));
            let s = sigmoid_neg(m);
            w.backprop(p, -s * beta, &mut grads);
            l.backprop(p, s * beta, &mut grads);
            neg_log_sigmoid(m)
        }
        (Target::Pref { chosen, rejected }, LossKind::Simpo { beta, gamma }) => {
            let w = SeqPass::run(p, demos, &ex.prompt, chosen)?;
            let l = SeqPass::run(p, demos, &ex.prompt, rejected)?;
            let cw = beta / chosen.len() as f64;
            let cl = beta / rejected.len() as f64;
            let m = cw * w.logp - cl * l.logp - gamma;
            let s = sigmoid_neg(m);
            w.backprop(p, -s * cw, &mut grads);
            l.backprop(p, s * cl, &mut grads);
            neg_log_sigmoid(m)
        }
        _ => unreachable!("kind checked"),
    };
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, init_params, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: layers,
            n_ctx: 96,
            query_offset: 48,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn rand_seq(rng: &mut ChaCha8Rng, n: usize) -> Vec<Token> {
        (0..n).map(|_| rng.gen_range(0..31)).collect()
    }

    /// Direct product of per-token probabilities from a plain forward pass at
    /// the query offset, independent of the loss code path.
    fn direct_logprob(p: &ModelParams, x: &[Token], y: &[Token]) -> f64 {
        let c = p.config();
        let mut seq = x.to_vec();
        seq.push(31);
        seq.extend_from_slice(y);
        let tr = forward(p, &seq, c.query_offset, 0).unwrap();
        let mut prob = 1.0f64;
        for (r, &t) in y.iter().enumerate() {
            let z = &tr.logits[(x.len() + r) * c.vocab..][..c.vocab];
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            prob *= e[t as usize] / e.iter().sum::<f64>();
        }
        prob.ln()
    }

    #[test]
    fn token_targets_match_sequence_loss() {
        let p = init_params(&cfg(2)).unwrap();
        let x = [4, 1, 7];
        let y = [7, 1, 4, 9];
        let demos = [Demo {
            holdout_id: 0,
            similarity: 1.0,
            prompt: vec![2, 3],
            response: vec![3, 2],
        }];
        let s = serialize_query(p.config(), &demos, &x, &y).unwrap();
        let targets: Vec<usize> = (s.y_start..s.tokens.len()).collect();
        let (l, g) = token_nll_and_grad(&p, &s.tokens, s.start_pos, &targets).unwrap();
        let ex = Example::sft(x.to_vec(), y.to_vec()).unwrap();
        let set = DemoSet { demos: demos.to_vec() };
        let (l2, g2) = loss_and_grad(&p, &LossSpec::sft(), &ex, Some(&set)).unwrap();
        assert!((l - l2).abs() < 1e-12);
        for (a, b) in g.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(token_nll_and_grad(&p, &s.tokens, s.start_pos, &[0]).is_err());
    }

    #[test]
    fn uniform_logits() {
        let mut p = init_params(&cfg(1)).unwrap();
        p.tensor_mut("w_out").unwrap().fill(0.0);
        let l = nll_loss(&p, &[1, 2, 3], &[4, 5, 6, 7, 8, 9, 10]).unwrap();
        assert!((l - 7.0 * 32f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nll_matches_direct_product() {
        let p = init_params(&cfg(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let nx = rng.gen_range(1..8);
            let x = rand_seq(&mut rng, nx);
            let ny = rng.gen_range(1..8);
            let y = rand_seq(&mut rng, ny);
            let l = nll_loss(&p, &x, &y).unwrap();
            assert!(l >= 0.0);
            assert!((l + direct_logprob(&p, &x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_demos_bitwise() {
        let p = init_params(&cfg(2)).unwrap();
        let a = nll_loss(&p, &[1, 2], &[3, 4]).unwrap();
        let b = conditional_nll_loss(&p, &DemoSet::empty(), &[1, 2], &[3, 4]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn zero_layer_ignores_demos() {
        let p = init_params(&cfg(0)).unwrap();
        let demos = DemoSet {
            demos: vec![Demo {
                holdout_id: 0,
                similarity: 1.0,
                prompt: vec![5, 6],
                response: vec![6, 5],
            }],
        };
        let a = nll_loss(&p, &[1, 2], &[2, 1]).unwrap();
        let b = conditional_nll_loss(&p, &demos, &[1, 2], &[2, 1]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let p = init_params(&cfg(1)).unwrap();
        let l = dpo_loss(&p, &p, &[1, 2], &[3], &[4, 5], 0.5).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dpo_swap_antisymmetry() {
        let p = init_params(&cfg(1)).unwrap();
        let r = init_params(&ModelConfig { seed: 9, ..cfg(1) }).unwrap();
        let (x, w, l) = (vec![1, 2], vec![3, 4], vec![5]);
        let lw = seq_logprob(&p, &[], &x, &w).unwrap() - seq_logprob(&r, &[], &x, &w).unwrap();
        let ll = seq_logprob(&p, &[], &x, &l).unwrap() - seq_logprob(&r, &[], &x, &l).unwrap();
        let m = 0.7 * (lw - ll);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let a = dpo_loss(&p, &r, &x, &w, &l, 0.7).unwrap();
        let b = dpo_loss(&p, &r, &x, &l, &w, 0.7).unwrap();
        assert!((a + sig(m).ln()).abs() < 1e-12);
        assert!((b + sig(-m).ln()).abs() < 1e-12);
    }

    #[test]
    fn simpo_zero_margin_and_gamma_monotone() {
        let p = init_params(&cfg(1)).unwrap();
        let l = simpo_loss(&p, &[1, 2], &[3, 4], &[3, 4], 2.5, 0.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let a = simpo_loss(&p, &[1, 2], &[3, 4], &[5], 2.5, 0.1).unwrap();
        let b = simpo_loss(&p, &[1, 2], &[3, 4], &[5], 2.5, 0.5).unwrap();
        assert!(b > a && a > 0.0);
    }

    #[test]
    fn pref_losses_match_direct_logprobs() {
        let p = init_params(&cfg(1)).unwrap();
        let r = init_params(&ModelConfig { seed: 11, ..cfg(1) }).unwrap();
        let (x, w, l) = (vec![7, 8, 9], vec![9, 8, 7], vec![1, 8, 2]);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let m = 0.3
            * ((direct_logprob(&p, &x, &w) - direct_logprob(&r, &x, &w))
                - (direct_logprob(&p, &x, &l) - direct_logprob(&r, &x, &l)));
        assert!((dpo_loss(&p, &r, &x, &w, &l, 0.3).unwrap() + sig(m).ln()).abs() < 1e-9);
        let m = 2.5 / 3.0 * direct_logprob(&p, &x, &w) - 2.5 / 3.0 * direct_logprob(&p, &x, &l) - 1.375;
        assert!((simpo_loss(&p, &x, &w, &l, 2.5, 1.375).unwrap() + sig(m).ln()).abs() < 1e-9);
    }

    #[test]
    fn spec_reference_rules() {
        let p = Arc::new(init_params(&cfg(1)).unwrap());
        assert!(LossSpec::new(LossKind::Dpo { beta: 0.1 }, None).is_err());
        assert!(LossSpec::new(LossKind::Sft, Some(p.clone())).is_err());
        assert!(LossSpec::new(LossKind::Simpo { beta: 1.0, gamma: 0.0 }, Some(p.clone())).is_err());
        assert!(LossSpec::new(LossKind::Dpo { beta: 0.1 }, Some(p)).is_ok());
        assert!(LossSpec::new(LossKind::Simpo { beta: 1.0, gamma: -1.0 }, None).is_err());
    }

    #[test]
    fn forward_logits_agrees_with_trace_at_origin() {
        let p = init_params(&cfg(1)).unwrap();
        let a = forward_logits(&p, &[1, 2, 3]).unwrap();
        let tr = forward(&p, &[1, 2, 3], 0, 0).unwrap();
        assert_eq!(a.concat(), tr.logits);
    }
}
