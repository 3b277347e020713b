//! `icluq`: train models, run the evaluation suites and studies, and run the
//! gradient and boundedness checks.
//!
//! Exit codes: 0 success, 1 check failure or failed run, 2 config error,
//! 3 IO or checkpoint-format error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use icl_uq::experiments::{self, GapPoint, GapStudyConfig, TruncationConfig};
use icl_uq::io::{self, PlotSpec, RunConfig};
use icl_uq::montecarlo::{eval_by_position, EvalSpec, Metric, MetricSeries, TaskSource};
use icl_uq::par::Execution;
use icl_uq::predict::SequencePredictor;
use icl_uq::rng::{streams, SeedStream};
use icl_uq::taskgen::{sample_sequence, sample_task, FlipMode, FlippedRegionConfig};
use icl_uq::trainer::{self, Checkpoint, TraceRow};
use icl_uq::transformer::{self, boundedness_certificate, InitScheme, TransformerPredictor};
use icl_uq::bayes::BayesPredictor;
use icl_uq::Error;

/// Largest relative gradient error accepted by `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "icluq", version, about = "In-context uncertainty quantification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `out_dir` from the config, else `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to read (repeatable for suites that compare models).
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
    /// Shorthand for `--set train.steps=N`.
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; with --checkpoint, resume from that file and overwrite it.
    Train(#[command(flatten)] Common),
    /// Per-position metrics of checkpoints against the Bayes oracle.
    Eval(#[command(flatten)] Common),
    /// Bayes, ridge and OLS curves on in-distribution tasks.
    BayesCurves(#[command(flatten)] Common),
    /// Average predicted σ under the shifted task priors.
    TaskShift(#[command(flatten)] Common),
    /// Distance from the Bayes oracle under covariate shifts.
    CovShift(#[command(flatten)] Common),
    /// |σ̂ − σ*| per position for length-generalization models.
    LengthShift(#[command(flatten)] Common),
    /// Train on flipped-region tasks (or read --checkpoint files) and track group accuracy.
    Flipped(#[command(flatten)] Common),
    /// Generalization gap of fixed-data training over a grid of (n, T, S).
    GapStudy(#[command(flatten)] Common),
    /// Risk lost by truncating the Bayes oracle's context.
    TruncationGap(#[command(flatten)] Common),
    /// Finite-difference check of the model gradients.
    Gradcheck(#[command(flatten)] Common),
    /// Boundedness certificate of a checkpoint (or a fresh initialization).
    Certify(#[command(flatten)] Common),
}

/// A check that ran and failed, as opposed to an error.
struct CheckFailed(String);

enum Failure {
    Check(CheckFailed),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    hash: String,
    quiet: bool,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, Error> {
        let mut overrides = c.set.clone();
        if let Some(s) = c.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(n) = c.steps {
            overrides.push(format!("train.steps={n}"));
        }
        let mut cfg = io::load_config(c.config.as_deref(), &overrides)?;
        if !c.checkpoint.is_empty() {
            cfg.experiment.checkpoints = c.checkpoint.clone();
            cfg.experiment.labels.clear();
        }
        let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        let hash = cfg.hash_hex();
        Ok(Self {
            cfg,
            out,
            hash,
            quiet: c.quiet,
        })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn exec(&self) -> Execution {
        self.cfg.train.exec()
    }

    fn path(&self, suite: &str, stem: &str, ext: &str) -> PathBuf {
        self.out.join(suite).join(format!("{stem}_{}.{ext}", self.hash))
    }

    fn write_json(&self, suite: &str, stem: &str, value: &impl Serialize) -> Result<PathBuf, Error> {
        let path = self.path(suite, stem, "json");
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    /// Writes every series as CSV and one SVG per metric (the last name
    /// component), plus the resolved config.
    fn emit(&self, suite: &str, series: &[MetricSeries]) -> Result<(), Error> {
        let mut series = series.to_vec();
        for s in &mut series {
            s.config_hash = self.hash.clone();
        }
        let files = io::write_suite(&self.out, suite, &series, &self.hash)?;
        self.write_json(suite, "config", &self.cfg)?;
        let mut metrics: Vec<String> = series
            .iter()
            .map(|s| plot_key(&s.name))
            .collect();
        metrics.sort();
        metrics.dedup();
        for m in &metrics {
            let group: Vec<MetricSeries> = series.iter().filter(|s| &plot_key(&s.name) == m).cloned().collect();
            let spec = PlotSpec {
                title: format!("{suite}: {m}"),
                x_label: if suite == "flipped" { "step".into() } else { "position t".into() },
                y_label: m.rsplit('/').next().unwrap_or(m).to_string(),
            };
            io::write_svg(&self.path(suite, &io::table::file_stem(m), "svg"), &group, &spec)?;
        }
        if series.is_empty() {
            log::warn!("{suite}: nothing to write");
        }
        self.say(format!("{suite}: wrote {} CSV files under {}", files.len(), self.out.join(suite).display()));
        Ok(())
    }

    fn models(&self) -> Result<Vec<TransformerPredictor>, Error> {
        let e = &self.cfg.experiment;
        if e.checkpoints.is_empty() {
            return Err(Error::Config {
                msg: "this subcommand needs at least one --checkpoint (or experiment.checkpoints)".into(),
                line: None,
            });
        }
        e.checkpoints
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let ckpt = io::load_checkpoint(p).map_err(|err| with_path(err, p))?;
                let label = e.labels.get(i).cloned().unwrap_or_else(|| {
                    p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string()
                });
                Ok(TransformerPredictor::named(ckpt.params, label))
            })
            .collect()
    }
}

/// Series are grouped into plots by environment and metric, dropping the
/// predictor: `l_cov/meta/mean_mse` plots with `l_cov/static/mean_mse`.
fn plot_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('/').collect();
    match parts.len() {
        0 | 1 => name.to_string(),
        2 => parts[1].to_string(),
        _ => format!("{}/{}", parts[0], parts[parts.len() - 1]),
    }
}

fn with_path(err: Error, p: &Path) -> Error {
    match err {
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))),
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", p.display()),
        },
        other => other,
    }
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), Error> {
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(["step", "train_loss", "eval_loss"]).map_err(io_err)?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            format!("{:.16e}", r.train_loss),
            r.eval_loss.map(|v| format!("{v:.16e}")).unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Outcome {
    let setup = ctx.cfg.train_setup()?;
    let target = ctx
        .cfg
        .experiment
        .checkpoints
        .first()
        .cloned()
        .unwrap_or_else(|| ctx.path("train", "model", "ckpt"));
    let start = if target.exists() && !ctx.cfg.experiment.checkpoints.is_empty() {
        let ckpt = io::load_checkpoint(&target).map_err(|e| with_path(e, &target))?;
        if ckpt.params.config() != &setup.model {
            return Err(Error::Config {
                msg: format!("{} was trained with a different [model] section", target.display()),
                line: None,
            }
            .into());
        }
        ctx.say(format!("resuming {} at step {}", target.display(), ckpt.step));
        ckpt
    } else {
        setup.init()?
    };
    let hash = ctx.cfg.hash();
    let mut save = |c: &Checkpoint| -> icl_uq::Result<()> {
        let mut c = c.clone();
        c.config_hash = hash;
        io::save_checkpoint(&target, &c)
    };
    let t0 = std::time::Instant::now();
    let result = trainer::resume(&setup, start.clone(), setup.train.steps, &mut save);
    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::Diverged { .. }) => {
            ctx.say(format!("{e}; last finite state saved to {}", target.display()));
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    save(&outcome.checkpoint)?;
    write_trace(&ctx.path("train", "trace", "csv"), &outcome.trace)?;
    if let Some(last) = outcome.trace.last() {
        ctx.say(format!(
            "step {}: train loss {:.5}{}",
            last.step,
            last.train_loss,
            last.eval_loss.map(|v| format!(", eval loss {v:.5}")).unwrap_or_default()
        ));
    }
    ctx.say(format!(
        "trained {} steps in {:.1?}; checkpoint {}",
        outcome.checkpoint.step - start.step,
        t0.elapsed(),
        target.display()
    ));
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Outcome {
    let models = ctx.models()?;
    let e = &ctx.cfg.experiment;
    let mut spec = EvalSpec::from_prior(ctx.cfg.prior.clone(), e.eval_len, e.n_eval, ctx.cfg.seed);
    spec.covariates = ctx.cfg.covariates.clone();
    spec.exec = ctx.exec();
    let bayes = BayesPredictor::new(ctx.cfg.prior.clone());
    let mut preds: Vec<&dyn SequencePredictor> = models.iter().map(|m| m as &dyn SequencePredictor).collect();
    preds.push(&bayes);
    let series: Vec<MetricSeries> = eval_by_position(&preds, &spec, &Metric::ALL)?.into_iter().flatten().collect();
    ctx.emit("eval", &series)?;
    Ok(())
}

fn cmd_bayes_curves(ctx: &Ctx) -> Outcome {
    let e = &ctx.cfg.experiment;
    let series = experiments::bayes_curves(&ctx.cfg.prior, &ctx.cfg.covariates, e.eval_len, e.n_eval, ctx.cfg.seed, ctx.exec())?;
    if let Some(s) = series.iter().find(|s| s.name == "bayes/avg_sigma") {
        ctx.say(format!("bayes avg σ* at t = {}: {:.4}", s.len(), s.mean[s.len() - 1]));
    }
    ctx.emit("bayes_curves", &series)?;
    Ok(())
}

fn cmd_task_shift(ctx: &Ctx) -> Outcome {
    let models = ctx.models()?;
    let e = &ctx.cfg.experiment;
    let series = experiments::task_shift_suite(&models, &ctx.cfg.prior, e.eval_len, e.n_eval, ctx.cfg.seed, ctx.exec())?;
    ctx.emit("task_shift", &series)?;
    Ok(())
}

fn cmd_cov_shift(ctx: &Ctx) -> Outcome {
    let models = ctx.models()?;
    let e = &ctx.cfg.experiment;
    let series = experiments::covariate_shift_suite(&models, &ctx.cfg.prior, e.eval_len, e.n_eval, ctx.cfg.seed, ctx.exec())?;
    ctx.emit("cov_shift", &series)?;
    Ok(())
}

fn cmd_length_shift(ctx: &Ctx) -> Outcome {
    let models = ctx.models()?;
    let e = &ctx.cfg.experiment;
    let series = experiments::length_shift_suite(&models, &ctx.cfg.prior, e.eval_len, e.n_eval, ctx.cfg.seed, ctx.exec())?;
    ctx.emit("length_shift", &series)?;
    Ok(())
}

fn cmd_flipped(ctx: &Ctx) -> Outcome {
    let d = ctx.cfg.prior.d;
    let e = &ctx.cfg.experiment;
    let checkpoints: Vec<(u64, transformer::ModelParams)> = if e.checkpoints.is_empty() {
        let mut setup = ctx.cfg.train_setup()?;
        setup.tasks = TaskSource::Flipped(FlippedRegionConfig::new(d, FlipMode::Id));
        if setup.train.checkpoint_every == 0 {
            setup.train.checkpoint_every = (setup.train.steps / 10).max(1);
        }
        let mut saved = Vec::new();
        let mut keep = |c: &Checkpoint| -> icl_uq::Result<()> {
            io::save_checkpoint(&ctx.path("flipped", &format!("step{:08}", c.step), "ckpt"), c)?;
            saved.push((c.step, c.params.clone()));
            Ok(())
        };
        trainer::train(&setup, &mut keep)?;
        saved
    } else {
        e.checkpoints
            .iter()
            .map(|p| {
                let c = io::load_checkpoint(p).map_err(|err| with_path(err, p))?;
                Ok((c.step, c.params))
            })
            .collect::<Result<_, Error>>()?
    };
    let series = experiments::flipped_suite(&checkpoints, d, e.eval_len, e.flipped_eval, ctx.cfg.seed, ctx.exec())?;
    for s in &series {
        if let (Some(x), Some(v)) = (s.x.last(), s.mean.last()) {
            ctx.say(format!("{} at step {x}: {v:.3}", s.name));
        }
    }
    let oracle = experiments::flipped_oracle_rates(d, FlipMode::Id, e.eval_len, e.flipped_eval, ctx.cfg.seed, ctx.exec())?;
    ctx.say(format!("group-aware Bayes oracle, ID accuracy: {:.3}", oracle.accuracy));
    ctx.write_json("flipped", "oracle", &oracle)?;
    ctx.emit("flipped", &series)?;
    Ok(())
}

fn cmd_gap_study(ctx: &Ctx) -> Outcome {
    let e = &ctx.cfg.experiment;
    let mut grid = Vec::new();
    for &seq_len in &e.gap_seq_lens {
        for &window in &e.gap_windows {
            for &n in &e.gap_ns {
                grid.push(GapPoint { n, seq_len, window });
            }
        }
    }
    let cfg = GapStudyConfig {
        model: ctx.cfg.model.clone(),
        train: ctx.cfg.train.clone(),
        prior: ctx.cfg.prior.clone(),
        covariates: ctx.cfg.covariates.clone(),
        grid,
        trials: e.trials,
        n_pop: e.n_pop,
        seed: ctx.cfg.seed,
    };
    let result = experiments::gap_study(&cfg)?;
    for m in &result.measurements {
        ctx.say(format!(
            "n={:4} T={:3} S={:3}: gap {:.5} ± {:.5} (train {:.5}, population {:.5}, {:.0} epochs)",
            m.point.n, m.point.seq_len, m.point.window, m.gap, m.stderr, m.train_risk, m.population_risk, m.mean_epochs
        ));
    }
    for f in &result.slope_vs_n {
        ctx.say(format!("slope vs n at (T, S) = {:?}: {:.3}", f.fixed, f.fit.slope));
    }
    ctx.write_json("gap_study", "result", &result)?;
    ctx.emit("gap_study", &result.series())?;
    Ok(())
}

fn cmd_truncation_gap(ctx: &Ctx) -> Outcome {
    let e = &ctx.cfg.experiment;
    let cfg = TruncationConfig {
        prior: ctx.cfg.prior.clone(),
        covariates: ctx.cfg.covariates.clone(),
        t_eval: e.t_eval,
        windows: e.windows.clone(),
        n_mc: e.n_mc,
        seed: ctx.cfg.seed,
        exec: ctx.exec(),
    };
    let r = experiments::truncation_gap_study(&cfg)?;
    for i in 0..r.gaps.len() {
        ctx.say(format!("S = {:4}: gap {:.5} ± {:.5}", r.gaps.x[i], r.gaps.mean[i], r.gaps.stderr[i]));
    }
    if let Some(f) = r.slope {
        ctx.say(format!("log-log slope vs S: {:.3}", f.slope));
    }
    ctx.emit("truncation_gap", std::slice::from_ref(&r.gaps))?;
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx) -> Outcome {
    let seeds = SeedStream::new(ctx.cfg.seed);
    let params = transformer::init_params(&ctx.cfg.model, &mut seeds.substream(streams::INIT, 0), InitScheme::Gaussian)?;
    let mut rng = seeds.substream(streams::CHECKS, 0);
    let task = sample_task(&ctx.cfg.prior, &mut rng);
    let seq = sample_sequence(&task, &ctx.cfg.covariates, ctx.cfg.experiment.gradcheck_len, &mut rng);
    let err = trainer::gradient_check(&params, &seq, 1e-5)?;
    ctx.say(format!(
        "gradcheck over {} parameters: max relative error {err:.3e} (tolerance {GRADCHECK_TOL:e})",
        params.num_trainable()
    ));
    if err < GRADCHECK_TOL {
        Ok(())
    } else {
        Err(Failure::Check(CheckFailed(format!("gradient error {err:.3e}"))))
    }
}

fn cmd_certify(ctx: &Ctx) -> Outcome {
    let e = &ctx.cfg.experiment;
    let params = match e.checkpoints.first() {
        Some(p) => io::load_checkpoint(p).map_err(|err| with_path(err, p))?.params,
        None => transformer::init_params(
            &ctx.cfg.model,
            &mut SeedStream::new(ctx.cfg.seed).substream(streams::INIT, 0),
            InitScheme::Gaussian,
        )?,
    };
    let mut rng = SeedStream::new(ctx.cfg.seed).substream(streams::CERTIFY, 0);
    let report = boundedness_certificate(&params, e.b_h, e.certify_trials, e.certify_len, &mut rng)?;
    ctx.write_json("certify", "report", &report)?;
    ctx.say(format!(
        "{} checks, {} violations; σ̂ in [{:.4e}, {:.4e}] within [{:.4e}, {:.4e}], |ŷ| ≤ {:.4e}",
        report.checks, report.violations, report.min_sigma, report.max_sigma, report.sigma_lo, report.sigma_hi, report.max_abs_y_hat
    ));
    report.ensure().map_err(|e| Failure::Check(CheckFailed(e.to_string())))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Io(_) | Error::Format { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&Ctx) -> Outcome) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Eval(c) => (c, cmd_eval),
        Command::BayesCurves(c) => (c, cmd_bayes_curves),
        Command::TaskShift(c) => (c, cmd_task_shift),
        Command::CovShift(c) => (c, cmd_cov_shift),
        Command::LengthShift(c) => (c, cmd_length_shift),
        Command::Flipped(c) => (c, cmd_flipped),
        Command::GapStudy(c) => (c, cmd_gap_study),
        Command::TruncationGap(c) => (c, cmd_truncation_gap),
        Command::Gradcheck(c) => (c, cmd_gradcheck),
        Command::Certify(c) => (c, cmd_certify),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if common.quiet { "error" } else { "warn" }))
        .init();
    let result = Ctx::new(common).map_err(Failure::Run).and_then(|ctx| run(&ctx));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
