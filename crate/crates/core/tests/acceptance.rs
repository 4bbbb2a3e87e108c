//! Acceptance criteria. Each test writes one `ACn PASS|FAIL` line with the
//! measured values to stderr, then asserts. Tests take a shared lock so that
//! runtime budgets are measured without competing for the CPU.

mod common;

use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use ica_reweight::cli::{cmd_train, group_means, RunSpec};
use ica_reweight::corpus::{
    generate_synthetic_pref, generate_synthetic_sft, Dataset, Example, GenConfig, Kind, Scenario, Transform, Vocab,
};
use ica_reweight::embed::build_index;
use ica_reweight::model::{
    dpo_loss, example_loss, init_params, loss_and_grad, nll_loss, simpo_loss, LossKind, LossSpec, ModelConfig,
    ModelParams,
};
use ica_reweight::reweight::{maxmin_weights, WeightingMode};
use ica_reweight::score::{
    demos_for, ica_score, oracle_one_step_gain, oracle_retrain, score_dataset, spearman, AuxCheckpoints, ScoreConfig,
    ScorerKind,
};
use ica_reweight::train::{
    evaluate_holdout, pretrain_icl, refresh_schedule, train, train_rho_reference, train_standard, OptimizerKind,
    PretrainConfig, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fd_check, jittered_model};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes to the stderr handle directly so the line shows even when the
/// harness captures test output.
fn report(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    report(&format!("AC{id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" }));
    assert!(pass, "AC{id} {name} failed: {detail}");
}

fn random_tokens(rng: &mut ChaCha8Rng, lo: usize, hi: usize, symbols: u32) -> Vec<u32> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| rng.gen_range(0..symbols)).collect()
}

#[test]
fn ac01_gradients_match_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tokens(&mut rng, 5, 5, 31);
    let yw = random_tokens(&mut rng, 4, 4, 31);
    let yl = random_tokens(&mut rng, 6, 6, 31);
    let sft = Example::sft(x.clone(), yw.clone()).unwrap();
    let pref = Example::pref(x, yw, yl).unwrap();
    let p = jittered_model(21, 16, 1);
    assert_eq!(p.config().vocab, 32);
    let reference = Arc::new(jittered_model(22, 16, 1));
    let cases = [
        ("sft", LossSpec::sft(), &sft),
        (
            "dpo",
            LossSpec::new(LossKind::Dpo { beta: 0.5 }, Some(reference)).unwrap(),
            &pref,
        ),
        (
            "simpo",
            LossSpec::new(LossKind::Simpo { beta: 2.5, gamma: 1.375 }, None).unwrap(),
            &pref,
        ),
    ];
    let mut worst = Vec::new();
    for (name, spec, ex) in &cases {
        let w = fd_check(
            &p,
            1e-3,
            |q| example_loss(q, spec, ex, None).unwrap(),
            |q| loss_and_grad(q, spec, ex, None).unwrap(),
        );
        worst.push(format!("{name} {w:.2e}"));
        assert!(w.is_finite());
        if w >= 1e-4 {
            verdict(1, "gradient check", false, &format!("{name} max relative error {w:e}"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient check",
        secs < 60.0,
        &format!("max relative error {} (< 1e-4), {secs:.1}s (< 60s)", worst.join(", ")),
    );
}

#[test]
fn ac02_analytic_loss_values() {
    let _g = serial();
    let cfg = ModelConfig {
        seed: 3,
        ..ModelConfig::default()
    };
    let mut uniform = init_params(&cfg).unwrap();
    uniform.tensor_mut("w_out").unwrap().fill(0.0);
    let v = cfg.vocab as f64;
    let x = vec![4, 8, 15, 16];
    let y = vec![23, 4, 2, 9, 1];
    let sft = nll_loss(&uniform, &x, &y).unwrap();
    let sft_err = (sft - y.len() as f64 * v.ln()).abs();

    let p = init_params(&cfg).unwrap();
    let yl = vec![9, 9, 1];
    let dpo = dpo_loss(&p, &p, &x, &y, &yl, 0.1).unwrap();
    let dpo_err = (dpo - 2f64.ln()).abs();

    // Uniform logits give every response the same per-token log-probability.
    let simpo = simpo_loss(&uniform, &x, &y, &yl, 2.5, 0.0).unwrap();
    let simpo_err = (simpo - 2f64.ln()).abs();

    let pass = sft_err < 1e-6 && dpo_err < 1e-9 && simpo_err < 1e-9;
    verdict(
        2,
        "analytic losses",
        pass,
        &format!("|sft - |y|lnV| {sft_err:.1e} (< 1e-6), |dpo - ln2| {dpo_err:.1e}, |simpo - ln2| {simpo_err:.1e} (< 1e-9)"),
    );
}

#[test]
fn ac03_ica_identities() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonzero = 0;
    for i in 0..100 {
        let p = jittered_model(100 + i, 16, 1 + (i as usize % 2));
        let x = random_tokens(&mut rng, 1, 6, 31);
        let y = random_tokens(&mut rng, 1, 6, 31);
        let ex = Example::sft(x, y).unwrap();
        let s = ica_score(&p, &LossSpec::sft(), &ex, &Default::default()).unwrap();
        if s != 0.0 {
            nonzero += 1;
        }
    }

    let gen = GenConfig {
        n_train: 64,
        n_holdout: 16,
        n_test: 4,
        ..GenConfig::default()
    };
    let data = generate_synthetic_sft(&gen, 3, &Vocab::default()).unwrap();
    let flat = init_params(&ModelConfig {
        n_layers: 0,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let index = build_index(&data.holdout, 32).unwrap();
    let table = score_dataset(
        &flat,
        &LossSpec::sft(),
        &data.train,
        &data.holdout,
        &ScoreConfig::default(),
        &index,
        &AuxCheckpoints::default(),
        0,
    )
    .unwrap();
    let flat_nonzero = table.scores().iter().filter(|&&s| s != 0.0).count();
    // The demos are real: the conditioning changes what a deeper model sees.
    let ex = &data.train.examples()[0];
    let demos = demos_for(ex, &index, 3, 32);
    assert_eq!(demos.len(), 3);

    verdict(
        3,
        "ICA identities",
        nonzero == 0 && flat_nonzero == 0,
        &format!("empty-demo nonzero scores {nonzero}/100, zero-layer nonzero scores {flat_nonzero}/64"),
    );
}

#[test]
fn ac04_maxmin_properties() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad_range = 0;
    let mut bad_max = 0;
    let mut worst_affine: f64 = 0.0;
    let mut exact_affine_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=16);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let w = maxmin_weights(&s).unwrap();
        if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            bad_range += 1;
        }
        if w.iter().copied().fold(f64::NEG_INFINITY, f64::max) != 1.0 {
            bad_max += 1;
        }
        let a = rng.gen_range(0.01..100.0);
        let b = rng.gen_range(-50.0..50.0);
        let t: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let wt = maxmin_weights(&t).unwrap();
        for (u, v) in w.iter().zip(&wt) {
            worst_affine = worst_affine.max((u - v).abs());
        }
        // Integer scores with power-of-two scale and integer shift stay exact.
        let si: Vec<f64> = (0..n).map(|_| rng.gen_range(-1000..1000) as f64).collect();
        let scale = 2f64.powi(rng.gen_range(-8..8));
        let shift = rng.gen_range(-1000..1000) as f64;
        let ti: Vec<f64> = si.iter().map(|x| scale * x + shift).collect();
        if maxmin_weights(&si).unwrap() != maxmin_weights(&ti).unwrap() {
            exact_affine_mismatch += 1;
        }
    }
    let all_equal = maxmin_weights(&[0.37; 9]).unwrap() == vec![1.0; 9];
    let pass = bad_range == 0 && bad_max == 0 && worst_affine < 1e-9 && exact_affine_mismatch == 0 && all_equal;
    verdict(
        4,
        "max-min weights",
        pass,
        &format!(
            "out-of-range {bad_range}/1000, max != 1 {bad_max}/1000, affine drift {worst_affine:.1e}, \
             exact-arithmetic affine mismatches {exact_affine_mismatch}/1000, all-equal -> ones {all_equal}"
        ),
    );
}

fn small_instance() -> (ica_reweight::corpus::Splits, ModelParams) {
    let gen = GenConfig {
        n_train: 72,
        n_holdout: 8,
        n_test: 8,
        ..GenConfig::default()
    };
    let data = generate_synthetic_sft(&gen, 8, &Vocab::default()).unwrap();
    let init = init_params(&ModelConfig {
        d_model: 16,
        n_layers: 1,
        seed: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    (data, init)
}

#[test]
fn ac08_control_equivalences() {
    let _g = serial();
    let (data, init) = small_instance();
    let base = TrainConfig {
        steps: 30,
        batch_size: 8,
        lr: 3e-3,
        eval_every: 10,
        seed: 8,
        ..TrainConfig::default()
    };
    let (standard, m_std) = train_standard(&data.train, &data.holdout, Some(&data.test), &init, &base).unwrap();
    let uniform_cfg = TrainConfig {
        weighting: WeightingMode::Uniform,
        ..base.clone()
    };
    let (uniform, m_uni) = train(
        &data.train,
        &data.holdout,
        Some(&data.test),
        &init,
        &uniform_cfg,
        &AuxCheckpoints::default(),
    )
    .unwrap();
    let same_params = standard.data() == uniform.data();
    let same_losses = m_std.step_losses() == m_uni.step_losses() && m_std.evals() == m_uni.evals();

    let zero_cfg = TrainConfig {
        weighting: WeightingMode::Zero,
        optimizer: OptimizerKind::Sgd,
        ..base
    };
    let (zeroed, _) = train(
        &data.train,
        &data.holdout,
        None,
        &init,
        &zero_cfg,
        &AuxCheckpoints::default(),
    )
    .unwrap();
    let unchanged = zeroed.data() == init.data();
    verdict(
        8,
        "control equivalences",
        same_params && same_losses && unchanged,
        &format!(
            "uniform == standard: params {same_params}, losses {same_losses}; zero-weight SGD unchanged {unchanged}"
        ),
    );
}

#[test]
fn ac09_refresh_schedule() {
    let _g = serial();
    let (data, init) = small_instance();
    let steps = 30;
    let mut details = Vec::new();
    let mut pass = true;
    for r in [1, 3, 5, 9] {
        let cfg = TrainConfig {
            steps,
            batch_size: 8,
            refreshes: r,
            lr: 3e-3,
            eval_every: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let (_, m) = train(&data.train, &data.holdout, None, &init, &cfg, &AuxCheckpoints::default()).unwrap();
        let expected = refresh_schedule(data.train.len(), 8, r, steps);
        let got = m.refresh_steps();
        pass &= got == expected;
        details.push(format!("R={r}: {} refreshes, match {}", got.len(), got == expected));
    }
    verdict(9, "refresh schedule", pass, &details.join("; "));
}

#[test]
fn ac10_runs_are_reproducible() {
    let _g = serial();
    let text = r#"
version = 1
seed = 2024

[gen]
n_train = 48
n_holdout = 8
n_test = 8

[model]
d_model = 16
n_layers = 1
n_ctx = 64
query_offset = 32

[pretrain]
steps = 20
batch_size = 4
max_demos = 2

[train]
steps = 25
batch_size = 4
eval_every = 5
lr = 0.003
refreshes = 2
"#;
    let tmp = tempfile::tempdir().unwrap();
    let spec = RunSpec::from_toml(text, tmp.path()).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cmd_train(&spec, &a, false).unwrap();
    cmd_train(&spec, &b, false).unwrap();
    let mut files: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    let has_core = files.iter().any(|f| f == "metrics.jsonl") && files.iter().any(|f| f == "checkpoint.bin");
    verdict(
        10,
        "determinism",
        differing.is_empty() && has_core,
        &format!("{} output files compared, {} differ", files.len(), differing.len()),
    );
    assert_eq!(spec.data_kind(), Kind::Sft);
}

/// Prompt length used by the experiment criteria and their pretraining.
const LEN: usize = 5;

/// A from-scratch model has no in-context ability, so the experiment criteria
/// start from one pretrained on reverse/identity tasks with demonstrations.
/// Built once per test process; the pretraining time is reported separately
/// from each criterion's runtime.
fn pretrained() -> &'static ModelParams {
    static P: OnceLock<ModelParams> = OnceLock::new();
    P.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = PretrainConfig {
            steps: 12_000,
            min_len: LEN,
            max_len: LEN,
            transforms: vec![Transform::Reverse, Transform::Identity],
            ..PretrainConfig::default()
        };
        let init = init_params(&ModelConfig::default()).unwrap();
        let (p, losses) = pretrain_icl(&init, &cfg).unwrap();
        let tail = &losses[losses.len() - 500..];
        report(&format!(
            "pretraining fixture: {} steps in {:.0}s, final loss {:.3}",
            cfg.steps,
            t0.elapsed().as_secs_f64(),
            tail.iter().sum::<f64>() / tail.len() as f64
        ));
        p
    })
}

fn gen(scenario: Scenario, n_train: usize, n_holdout: usize) -> GenConfig {
    GenConfig {
        scenario,
        n_train,
        n_holdout,
        min_len: LEN,
        max_len: LEN,
        ..GenConfig::default()
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-6
}

// Frozen from the first verified run.
const AC5_ONE_STEP: f64 = 0.7173753665689149;
const AC5_RETRAIN: f64 = 0.5647058823529412;

#[test]
fn ac05_ica_tracks_the_oracle() {
    let _g = serial();
    let init = pretrained();
    let t0 = Instant::now();
    let s = generate_synthetic_sft(&gen(Scenario::Noise, 32, 16), 0, &Vocab::default()).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        lr: 3e-4,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let (p, _) = train_standard(&s.train, &s.holdout, None, init, &cfg).unwrap();
    let sft = LossSpec::sft();
    let index = build_index(&s.holdout, 32).unwrap();
    let ica = score_dataset(&p, &sft, &s.train, &s.holdout, &ScoreConfig::default(), &index, &AuxCheckpoints::default(), 0)
        .unwrap()
        .scores();
    let one_step: Vec<f64> = s
        .train
        .iter()
        .map(|e| oracle_one_step_gain(&p, &sft, e, &s.holdout, cfg.oracle_lr).unwrap())
        .collect();
    let r1 = spearman(&ica, &one_step).unwrap();

    // Retrain on each of 16 candidates alone; the gain is the holdout loss drop.
    let base = evaluate_holdout(&p, &s.holdout, &sft).unwrap();
    let rcfg = TrainConfig {
        steps: 20,
        batch_size: 1,
        ..cfg.clone()
    };
    let empty = Dataset::empty(Kind::Sft);
    let retrain: Vec<f64> = s
        .train
        .iter()
        .take(16)
        .map(|e| base - oracle_retrain(&empty, e, &s.holdout, &p, &rcfg).unwrap())
        .collect();
    let r2 = spearman(&ica[..16], &retrain).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = r1 > 0.3 && r2 > 0.0 && close(r1, AC5_ONE_STEP) && close(r2, AC5_RETRAIN) && secs < 600.0;
    verdict(
        5,
        "oracle correlation",
        pass,
        &format!("spearman(ica, one-step) {r1} (frozen {AC5_ONE_STEP}), spearman(ica, retrain, 16) {r2} (frozen {AC5_RETRAIN}), {secs:.0}s"),
    );
}

fn noise_run(loss: LossKind) -> (f64, f64, f64) {
    let init = pretrained();
    let t0 = Instant::now();
    let g = gen(Scenario::Noise, 512, 64);
    let s = if loss == LossKind::Sft {
        generate_synthetic_sft(&g, 0, &Vocab::default())
    } else {
        generate_synthetic_pref(&g, 0, &Vocab::default())
    }
    .unwrap();
    let base = TrainConfig {
        steps: 2000,
        lr: 1e-4,
        loss,
        eval_every: 200,
        ..TrainConfig::default()
    };
    let mut finals = [0.0; 2];
    for (slot, weighting) in finals.iter_mut().zip([WeightingMode::Uniform, WeightingMode::Maxmin]) {
        let cfg = TrainConfig { weighting, ..base.clone() };
        let (_, m) = train(&s.train, &s.holdout, None, init, &cfg, &AuxCheckpoints::default()).unwrap();
        *slot = m.final_holdout().unwrap();
    }
    (finals[0], finals[1], t0.elapsed().as_secs_f64())
}

fn ac06_case(name: &str, loss: LossKind, frozen_margin: f64) {
    let _g = serial();
    let (uniform, maxmin, secs) = noise_run(loss);
    let margin = uniform - maxmin;
    let pass = maxmin < uniform && close(margin, frozen_margin) && secs < 900.0;
    verdict(
        6,
        &format!("noise robustness ({name})"),
        pass,
        &format!("uniform {uniform:.4}, ica+maxmin {maxmin:.4}, margin {margin} (frozen {frozen_margin}), {secs:.0}s"),
    );
}

#[test]
fn ac06_noise_robustness_sft() {
    ac06_case("sft", LossKind::Sft, 0.45926788854059963);
}

#[test]
fn ac06_noise_robustness_dpo() {
    ac06_case("dpo", LossKind::Dpo { beta: 1.0 }, 0.1433748670086411);
}

#[test]
fn ac06_noise_robustness_simpo() {
    ac06_case("simpo", LossKind::Simpo { beta: 2.5, gamma: 1.375 }, 0.4870847641733938);
}

#[test]
fn ac07_target_domain_ranks_highest() {
    let _g = serial();
    let init = pretrained();
    let t0 = Instant::now();
    let s = generate_synthetic_sft(&gen(Scenario::Domain, 512, 64), 0, &Vocab::default()).unwrap();
    let cfg = TrainConfig {
        steps: 500,
        lr: 1e-4,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let (p, _) = train_standard(&s.train, &s.holdout, None, init, &cfg).unwrap();
    let rho = train_rho_reference(&s.holdout, init, &cfg).unwrap();
    let aux = AuxCheckpoints {
        rho_reference: Some(Arc::new(rho)),
        initial: Some(Arc::new(init.clone())),
    };
    let index = build_index(&s.holdout, 32).unwrap();
    let target = GenConfig::default().target_domain.to_string();
    let mut means = Vec::new();
    for kind in [ScorerKind::Ica, ScorerKind::Rho, ScorerKind::OneShot] {
        let sc = ScoreConfig { kind, ..ScoreConfig::default() };
        let t = score_dataset(&p, &LossSpec::sft(), &s.train, &s.holdout, &sc, &index, &aux, 0).unwrap();
        let by_domain: Vec<(String, f64)> = group_means(&t.scores(), &s.train, true)
            .unwrap()
            .into_iter()
            .filter(|g| g.group == "domain")
            .map(|g| (g.key, g.mean))
            .collect();
        means.push(by_domain);
    }
    let target_mean = |m: &[(String, f64)]| m.iter().find(|(k, _)| *k == target).unwrap().1;
    let ica_t = target_mean(&means[0]);
    let best_other = means[0].iter().filter(|(k, _)| *k != target).map(|x| x.1).fold(f64::MIN, f64::max);
    let (rho_t, one_t) = (target_mean(&means[1]), target_mean(&means[2]));
    let pass = ica_t > best_other && ica_t > one_t && rho_t > one_t;
    let fmt = |m: &[(String, f64)]| m.iter().map(|(k, v)| format!("{k}:{v:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        7,
        "domain ordering",
        pass,
        &format!(
            "ica [{}] rho [{}] one-shot [{}], target {target}, {:.0}s",
            fmt(&means[0]),
            fmt(&means[1]),
            fmt(&means[2]),
            t0.elapsed().as_secs_f64()
        ),
    );
}
