#![allow(dead_code)]

use ica_reweight::corpus::Example;
use ica_reweight::model::{init_params, Demo, DemoSet, Gradients, ModelConfig, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_config(seed: u64, d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab: 32,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        n_ctx: 48,
        query_offset: 24,
        seed,
    }
}

/// Random init plus N(0, 0.1²) jitter on every entry, so norms and biases are
/// away from their special initial values.
pub fn jittered_model(seed: u64, d: usize, layers: usize) -> ModelParams {
    let mut p = init_params(&tiny_config(seed, d, layers)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let n = Normal::new(0.0, 0.1).unwrap();
    for x in p.data_mut() {
        *x += n.sample(&mut rng);
    }
    p
}

pub fn sft_example() -> Example {
    Example::sft(vec![3, 1, 4, 1, 5], vec![5, 1, 4, 1, 3]).unwrap()
}

pub fn pref_example() -> Example {
    Example::pref(vec![2, 7, 1, 8], vec![8, 1, 7, 2], vec![8, 9, 7, 3, 3]).unwrap()
}

pub fn some_demos() -> DemoSet {
    DemoSet {
        demos: vec![
            Demo {
                holdout_id: 0,
                similarity: 0.9,
                prompt: vec![1, 2, 3],
                response: vec![3, 2, 1],
            },
            Demo {
                holdout_id: 1,
                similarity: 0.5,
                prompt: vec![4, 5],
                response: vec![5, 4],
            },
        ],
    }
}

/// Denominator floor for tensors whose gradient vanishes identically (the
/// attention key bias shifts every score in a row equally), where only
/// roundoff of order 1e-12 remains.
pub const FD_FLOOR: f64 = 1e-7;

/// Worst per-tensor relative error ‖fd − g‖∞ / max(‖fd‖∞, ‖g‖∞, FD_FLOOR)
/// over all parameter tensors, using central differences with step `eps`.
pub fn fd_check(
    p: &ModelParams,
    eps: f64,
    loss: impl Fn(&ModelParams) -> f64,
    grad: impl Fn(&ModelParams) -> (f64, Gradients),
) -> f64 {
    let (l0, g) = grad(p);
    assert!((l0 - loss(p)).abs() < 1e-12);
    let mut q = p.clone();
    let mut worst: f64 = 0.0;
    for spec in p.layout().specs() {
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in spec.range() {
            let orig = q.data()[i];
            q.data_mut()[i] = orig + eps;
            let up = loss(&q);
            q.data_mut()[i] = orig - eps;
            let down = loss(&q);
            q.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = g.data()[i];
            err = err.max((fd - an).abs());
            scale = scale.max(fd.abs()).max(an.abs());
        }
        let rel = err / scale.max(FD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}
