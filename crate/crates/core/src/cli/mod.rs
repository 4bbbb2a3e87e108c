//! Command-line experiment runner.

mod report;
mod runspec;

pub use report::{
    auc, compare_metrics, correlations, fmt_opt, group_means, normalize, CompareReport, Correlation, GroupMean,
    MetricRow, PointRow,
};
pub use runspec::{DataSpec, OracleMode, OracleSpec, RunSpec, Seeds, RUNSPEC_VERSION};

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::{save_jsonl, Dataset, Splits};
use crate::embed::build_index;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::score::{
    oracle_one_step_gain, oracle_retrain, score_dataset, AuxCheckpoints, ScoreConfig, ScoreTable, ScorerKind,
};
use crate::train::{evaluate_holdout, train, train_rho_reference, RunMetrics, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ica-reweight", version, about = "Holdout-loss data valuation and reweighted fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run specification (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerChoice {
    Ica,
    Rho,
    OneShot,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/holdout/test JSONL and a manifest.
    Gen(#[command(flatten)] Common),
    /// Run only the [pretrain] phase; writes pretrained.bin and pretrain_loss.csv.
    Pretrain(#[command(flatten)] Common),
    /// Train with score reweighting; writes checkpoint.bin and metrics.jsonl.
    Train(#[command(flatten)] Common),
    /// Compare two metrics.jsonl files (A minus B).
    Compare {
        metrics_a: PathBuf,
        metrics_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Per-example scores of a checkpoint and their per-domain/per-flag means.
    ScoreReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        scorer: ScorerChoice,
        /// θ_0 for the one-shot scorer and RHO reference training (default: --checkpoint).
        #[arg(long)]
        initial: Option<PathBuf>,
        /// Precomputed RHO reference (default: trained on the holdout set).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Correlate scorers with a one-step or retraining oracle.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides oracle.mode from the config.
        #[arg(long, value_enum)]
        mode: Option<OracleMode>,
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and maps errors to exit codes:
/// 2 for invalid configuration, 1 for any other failure.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::GenConfig(_) | Error::ModelConfig(_) | Error::TrainConfig(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => cmd_gen(&load_spec(&c)?, &c.out, c.force),
        Command::Pretrain(c) => cmd_pretrain(&load_spec(&c)?, &c.out, c.force),
        Command::Train(c) => cmd_train(&load_spec(&c)?, &c.out, c.force).map(|_| ()),
        Command::Compare {
            metrics_a,
            metrics_b,
            out,
            force,
        } => cmd_compare(&metrics_a, &metrics_b, &out, force).map(|_| ()),
        Command::ScoreReport {
            common,
            checkpoint,
            scorer,
            initial,
            reference,
        } => cmd_score_report(
            &load_spec(&common)?,
            &checkpoint,
            scorer,
            initial.as_deref(),
            reference.as_deref(),
            &common.out,
            common.force,
        )
        .map(|_| ()),
        Command::Oracle {
            common,
            checkpoint,
            mode,
            initial,
            reference,
        } => {
            let spec = load_spec(&common)?;
            let mode = mode.unwrap_or(spec.oracle.mode);
            cmd_oracle(
                &spec,
                &checkpoint,
                mode,
                initial.as_deref(),
                reference.as_deref(),
                &common.out,
                common.force,
            )
            .map(|_| ())
        }
    }
}

fn load_spec(c: &Common) -> Result<RunSpec> {
    let spec = RunSpec::load(&c.config)?.with_seed(c.seed);
    spec.validate()?;
    Ok(spec)
}

/// Creates `dir`, refusing a non-empty existing one unless forced.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// CSV with a leading `# key=value ...` comment line carrying provenance.
fn csv_writer(path: &Path, header_comment: &str) -> Result<csv::Writer<File>> {
    let mut f = File::create(path)?;
    writeln!(f, "# {header_comment}")?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(format!("csv: {e}"))
}

#[derive(Debug, Serialize)]
struct Counts {
    train: usize,
    holdout: usize,
    test: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    seed: u64,
    gen_seed: u64,
    kind: &'static str,
    counts: Counts,
    corrupted: usize,
    gen: &'a crate::corpus::GenConfig,
}

fn write_splits(spec: &RunSpec, s: &Splits, out: &Path) -> Result<()> {
    let vocab = spec.vocab()?;
    save_jsonl(&s.train, &out.join("train.jsonl"), &vocab)?;
    save_jsonl(&s.holdout, &out.join("holdout.jsonl"), &vocab)?;
    save_jsonl(&s.test, &out.join("test.jsonl"), &vocab)?;
    let manifest = Manifest {
        seed: spec.seed,
        gen_seed: spec.seeds().gen,
        kind: spec.data_kind().as_str(),
        counts: Counts {
            train: s.train.len(),
            holdout: s.holdout.len(),
            test: s.test.len(),
        },
        corrupted: s.train.corrupted_count(),
        gen: &spec.gen,
    };
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

pub fn cmd_gen(spec: &RunSpec, out: &Path, force: bool) -> Result<()> {
    prepare_out_dir(out, force)?;
    write_splits(spec, &spec.generate()?, out)
}

/// Pretraining only, for reuse through `init_checkpoint`.
pub fn cmd_pretrain(spec: &RunSpec, out: &Path, force: bool) -> Result<()> {
    if spec.pretrain.is_none() {
        return Err(Error::Config("pretrain needs a [pretrain] section in the config".into()));
    }
    prepare_out_dir(out, force)?;
    let (p, losses) = spec.pretrained()?;
    save_checkpoint(&p, &out.join("pretrained.bin"))?;
    let mut w = csv_writer(&out.join("pretrain_loss.csv"), &format!("seed={}", spec.seed))?;
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Full training run. Writes `init.bin` (the starting checkpoint),
/// `rho_reference.bin` for RHO runs, `checkpoint.bin`, `metrics.jsonl` and
/// `summary.txt`, plus the datasets when they were generated.
pub fn cmd_train(spec: &RunSpec, out: &Path, force: bool) -> Result<RunMetrics> {
    prepare_out_dir(out, force)?;
    let (data, generated) = spec.datasets()?;
    if generated {
        write_splits(spec, &data, out)?;
    }
    let cfg = spec.train_config();
    let init = spec.initial_params()?;
    save_checkpoint(&init, &out.join("init.bin"))?;
    let mut aux = AuxCheckpoints::default();
    if cfg.scorer == ScorerKind::Rho {
        let r = train_rho_reference(&data.holdout, &init, &cfg)?;
        save_checkpoint(&r, &out.join("rho_reference.bin"))?;
        aux.rho_reference = Some(Arc::new(r));
    }
    let (theta, mut metrics) = train(&data.train, &data.holdout, Some(&data.test), &init, &cfg, &aux)?;
    save_checkpoint(&theta, &out.join("checkpoint.bin"))?;
    metrics.set_checkpoint("checkpoint.bin");
    metrics.set_seed(spec.seed);
    metrics.write_jsonl(&out.join("metrics.jsonl"))?;
    let mut s = String::new();
    writeln!(s, "seed {}", spec.seed).unwrap();
    writeln!(s, "steps {}", cfg.steps).unwrap();
    writeln!(s, "refresh steps {:?}", metrics.refresh_steps()).unwrap();
    for (step, h, t) in metrics.evals().iter().rev().take(1) {
        writeln!(s, "final holdout loss {h:.6} (step {step})").unwrap();
        if let Some(t) = t {
            writeln!(s, "final test loss {t:.6}").unwrap();
        }
    }
    write_text(&out.join("summary.txt"), &s)?;
    Ok(metrics)
}

pub fn cmd_compare(a: &Path, b: &Path, out: &Path, force: bool) -> Result<CompareReport> {
    let ma = RunMetrics::read_jsonl(a)?;
    let mb = RunMetrics::read_jsonl(b)?;
    let report = compare_metrics(&ma, &mb)?;
    prepare_out_dir(out, force)?;
    let seeds = format!(
        "seed_a={} seed_b={}",
        ma.seed().map_or("none".into(), |s| s.to_string()),
        mb.seed().map_or("none".into(), |s| s.to_string())
    );
    let mut w = csv_writer(&out.join("compare.csv"), &seeds)?;
    w.write_record(["metric", "a", "b", "delta", "a_better"]).map_err(csv_err)?;
    let mut text = format!("{seeds}\nA = {}\nB = {}\n", a.display(), b.display());
    for r in &report.rows {
        w.write_record([
            r.metric.clone(),
            r.a.to_string(),
            r.b.to_string(),
            r.delta.to_string(),
            r.a_better.to_string(),
        ])
        .map_err(csv_err)?;
        writeln!(
            text,
            "{:<14} A {:>12.6}  B {:>12.6}  delta {:>+12.6}  {}",
            r.metric,
            r.a,
            r.b,
            r.delta,
            if r.a_better { "A better" } else { "A not better" }
        )
        .unwrap();
    }
    w.flush()?;
    let mut w = csv_writer(&out.join("compare_points.csv"), &seeds)?;
    w.write_record(["step", "holdout_a", "holdout_b", "holdout_delta", "test_a", "test_b", "test_delta"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for p in &report.points {
        let td = match (p.test_a, p.test_b) {
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        };
        w.write_record([
            p.step.to_string(),
            p.holdout_a.to_string(),
            p.holdout_b.to_string(),
            (p.holdout_a - p.holdout_b).to_string(),
            opt(p.test_a),
            opt(p.test_b),
            opt(td),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    write_text(&out.join("compare.txt"), &text)?;
    Ok(report)
}

/// Aux checkpoints for report commands: θ_0 from `--initial` (or the
/// checkpoint itself), the RHO reference from `--reference` or trained on
/// the holdout set from θ_0.
fn report_aux(
    spec: &RunSpec,
    theta: &ModelParams,
    holdout: &Dataset,
    initial: Option<&Path>,
    reference: Option<&Path>,
    need_rho: bool,
) -> Result<AuxCheckpoints> {
    let init = match initial {
        Some(p) => load_checkpoint(p)?,
        None => theta.clone(),
    };
    theta.check_congruent(&init)?;
    let rho = match (reference, need_rho) {
        (Some(p), _) => Some(load_checkpoint(p)?),
        (None, true) => Some(train_rho_reference(holdout, &init, &spec.train_config())?),
        (None, false) => None,
    };
    Ok(AuxCheckpoints {
        rho_reference: rho.map(Arc::new),
        initial: Some(Arc::new(init)),
    })
}

fn score_with(
    theta: &ModelParams,
    spec: &RunSpec,
    data: &Splits,
    kind: ScorerKind,
    aux: &AuxCheckpoints,
    cfg: &TrainConfig,
) -> Result<ScoreTable> {
    let init = aux.initial.as_deref().unwrap_or(theta);
    let loss = cfg.loss_spec(init)?;
    let index = build_index(&data.holdout, spec.model.vocab)?;
    let sc = ScoreConfig {
        kind,
        ..cfg.score_config()
    };
    score_dataset(theta, &loss, &data.train, &data.holdout, &sc, &index, aux, 0)
}

/// Writes `scores_<scorer>.csv` per scorer and `score_report.{csv,txt}` with
/// per-domain and per-flag means of full-set-normalized scores.
pub fn cmd_score_report(
    spec: &RunSpec,
    checkpoint: &Path,
    scorer: ScorerChoice,
    initial: Option<&Path>,
    reference: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<Vec<(ScorerKind, Vec<GroupMean>)>> {
    let (data, _) = spec.datasets()?;
    let require_domains = spec.gen.scenario == crate::corpus::Scenario::Domain && spec.data.dir.is_none();
    let kinds: Vec<ScorerKind> = match scorer {
        ScorerChoice::Ica => vec![ScorerKind::Ica],
        ScorerChoice::Rho => vec![ScorerKind::Rho],
        ScorerChoice::OneShot => vec![ScorerKind::OneShot],
        ScorerChoice::All => vec![ScorerKind::Ica, ScorerKind::Rho, ScorerKind::OneShot],
    };
    let theta = load_checkpoint(checkpoint)?;
    // Label problems surface before any scoring work.
    group_means(&vec![0.0; data.train.len()], &data.train, require_domains)?;
    prepare_out_dir(out, force)?;
    let aux = report_aux(spec, &theta, &data.holdout, initial, reference, kinds.contains(&ScorerKind::Rho))?;
    let cfg = spec.train_config();
    let header = format!("seed={} checkpoint={}", spec.seed, checkpoint.display());
    let mut all = Vec::new();
    for kind in kinds {
        let table = score_with(&theta, spec, &data, kind, &aux, &cfg)?;
        let mut w = csv_writer(&out.join(format!("scores_{}.csv", kind.as_str())), &header)?;
        w.write_record(["example_id", "score", "computed_at_step", "corrupted_flag", "domain"])
            .map_err(csv_err)?;
        for (i, (e, ex)) in table.entries.iter().zip(data.train.iter()).enumerate() {
            w.write_record([
                i.to_string(),
                e.score.to_string(),
                e.computed_at_step.to_string(),
                ex.corrupted.to_string(),
                ex.domain.map_or(String::new(), |d| d.to_string()),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        all.push((kind, group_means(&table.scores(), &data.train, require_domains)?));
    }
    let mut w = csv_writer(&out.join("score_report.csv"), &header)?;
    w.write_record(["scorer", "group", "key", "mean_normalized_score", "count"])
        .map_err(csv_err)?;
    let mut text = format!("{header}\n");
    for (kind, means) in &all {
        writeln!(text, "[{}]", kind.as_str()).unwrap();
        for m in means {
            w.write_record([
                kind.as_str().to_string(),
                m.group.clone(),
                m.key.clone(),
                m.mean.to_string(),
                m.count.to_string(),
            ])
            .map_err(csv_err)?;
            writeln!(text, "  {} {:<10} mean {:.4} (n={})", m.group, m.key, m.mean, m.count).unwrap();
        }
    }
    w.flush()?;
    write_text(&out.join("score_report.txt"), &text)?;
    Ok(all)
}

/// Per-example oracle values with ICA, RHO and one-shot scores, and the
/// Spearman/Pearson correlation of each scorer with the oracle.
///
/// One-step: the holdout-loss drop after one SGD step of `train.oracle_lr` on
/// the example. Retrain: L(D_ho; θ) − L(D_ho; θ trained on the example alone
/// for `oracle.retrain_steps` steps).
pub fn cmd_oracle(
    spec: &RunSpec,
    checkpoint: &Path,
    mode: OracleMode,
    initial: Option<&Path>,
    reference: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<Vec<Correlation>> {
    let (data, _) = spec.datasets()?;
    let theta = load_checkpoint(checkpoint)?;
    let cfg = spec.train_config();
    if mode == OracleMode::Retrain && data.train.len() > crate::score::RETRAIN_BUDGET {
        return Err(Error::OracleBudget(format!(
            "{} candidates exceed the retraining budget of {}",
            data.train.len(),
            crate::score::RETRAIN_BUDGET
        )));
    }
    prepare_out_dir(out, force)?;
    let aux = report_aux(spec, &theta, &data.holdout, initial, reference, true)?;
    let ica = score_with(&theta, spec, &data, ScorerKind::Ica, &aux, &cfg)?.scores();
    let rho = score_with(&theta, spec, &data, ScorerKind::Rho, &aux, &cfg)?.scores();
    let one = score_with(&theta, spec, &data, ScorerKind::OneShot, &aux, &cfg)?.scores();
    let loss = cfg.loss_spec(aux.initial.as_deref().unwrap_or(&theta))?;
    let oracle: Vec<f64> = match mode {
        OracleMode::OneStep => data
            .train
            .iter()
            .map(|ex| oracle_one_step_gain(&theta, &loss, ex, &data.holdout, cfg.oracle_lr))
            .collect::<Result<_>>()?,
        OracleMode::Retrain => {
            let base_loss = evaluate_holdout(&theta, &data.holdout, &loss)?;
            let rcfg = TrainConfig {
                steps: spec.oracle.retrain_steps,
                batch_size: 1,
                eval_every: 0,
                ..cfg.clone()
            };
            let empty = Dataset::empty(data.train.kind());
            data.train
                .iter()
                .map(|ex| Ok(base_loss - oracle_retrain(&empty, ex, &data.holdout, &theta, &rcfg)?))
                .collect::<Result<_>>()?
        }
    };
    let header = format!("seed={} checkpoint={} mode={:?}", spec.seed, checkpoint.display(), mode);
    let mut w = csv_writer(&out.join("oracle.csv"), &header)?;
    w.write_record(["example_id", "ica", "rho", "one_shot", "oracle"]).map_err(csv_err)?;
    for i in 0..oracle.len() {
        w.write_record([
            i.to_string(),
            ica[i].to_string(),
            rho[i].to_string(),
            one[i].to_string(),
            oracle[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let corr = correlations(
        &[("ica", &ica), ("rho", &rho), ("one_shot", &one), ("oracle", &oracle)],
        &oracle,
    );
    let mut w = csv_writer(&out.join("correlations.csv"), &header)?;
    w.write_record(["scorer", "spearman", "pearson"]).map_err(csv_err)?;
    let mut text = format!("{header}\n");
    for c in &corr {
        w.write_record([c.scorer.clone(), fmt_opt(c.spearman), fmt_opt(c.pearson)])
            .map_err(csv_err)?;
        writeln!(
            text,
            "{:<9} spearman {:>10}  pearson {:>10}",
            c.scorer,
            fmt_opt(c.spearman),
            fmt_opt(c.pearson)
        )
        .unwrap();
    }
    w.flush()?;
    write_text(&out.join("correlations.txt"), &text)?;
    Ok(corr)
}
