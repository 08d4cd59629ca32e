//! The `trh` command-line experiment runner.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::attacks::{accuracy, eval_robust_accuracy, Norm};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_csv, normalize_center, two_moons, Dataset};
use crate::error::{Error, Result};
use crate::network::MlpNetwork;
use crate::trainer::{train, TrainRun};
use crate::verify::{run_suite, Fault, FormulaSet, Level};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.trhnet";

#[derive(Parser, Debug)]
#[command(name = "trh", version, about = "Robust training with trace-of-Hessian regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write model.trhnet and metrics.csv.
    Train(RunArgs),
    /// Clean and multi-restart PGD accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Train while logging trace measurements to trace.csv.
    Trace(TraceArgs),
    /// Train while logging Hessian eigenvalue summaries to spectrum.csv.
    Spectrum(SpectrumArgs),
    /// Train once per parameter value, in parallel, and tabulate accuracy.
    Sweep(SweepArgs),
    /// Run the finite-difference oracle suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Experiment file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Supplies dataset, normalization and attack defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV dataset to evaluate on instead of the configured one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Attack seed; defaults to `eval.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for eval.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum NormArg {
    Linf,
    L2,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasureArg {
    /// Closed-form columns only.
    Top,
    /// Closed-form columns plus the Hutchinson estimate.
    Full,
    /// Same columns as `top`.
    Layers,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "full")]
    pub measure: MeasureArg,
    #[arg(long, default_value_t = 1)]
    pub every: usize,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1)]
    pub every: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Config key to vary; `lambda` and `gamma` are shorthands.
    #[arg(long, default_value = "lambda")]
    pub param: String,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum LevelArg {
    Quick,
    Full,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "quick")]
    pub level: LevelArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate one closed form to check that the suite notices.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train(args) => cmd_train(&args, |_| {}),
        Command::Trace(args) => {
            let measure = args.measure;
            let every = args.every.max(1);
            cmd_train(&args.run, move |cfg| {
                cfg.measure.every = every;
                cfg.measure.trace = true;
                cfg.measure.hutchinson = measure == MeasureArg::Full;
            })
        }
        Command::Spectrum(args) => {
            let every = args.every.max(1);
            cmd_train(&args.run, move |cfg| {
                cfg.measure.every = every;
                cfg.measure.spectrum = true;
            })
        }
        Command::Eval(args) => cmd_eval(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Verify(args) => cmd_verify(&args),
    }
}

fn split_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(Error::config(s, None, "expected KEY=VALUE")),
    }
}

fn overrides(args: &RunArgs) -> Result<Vec<(String, String)>> {
    let mut out = args.set.iter().map(|s| split_assignment(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = args.seed {
        out.push(("train.seed".into(), seed.to_string()));
    }
    if let Some(dir) = &args.out {
        out.push(("output.dir".into(), dir.display().to_string()));
    }
    Ok(out)
}

pub fn load_config(path: &Path, extra: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse_with_overrides(&text, extra)
}

/// Trains according to `cfg` without touching the filesystem.
pub fn train_from_config(cfg: &ExperimentConfig) -> Result<TrainRun> {
    let (ds, norm) = cfg.dataset()?;
    let attack = cfg.attack_for(norm.as_ref());
    let net = cfg.init_network(&ds)?;
    train(net, &ds, cfg.kind, &cfg.trh, &attack, &cfg.train, &cfg.measure)
}

/// Writes the checkpoint and every populated log into `dir`.
pub fn write_run(run: &TrainRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    run.net.save(&dir.join(CHECKPOINT_FILE))?;
    run.log.write_metrics(&dir.join("metrics.csv"))?;
    if !run.log.trace.is_empty() {
        run.log.write_trace(&dir.join("trace.csv"))?;
    }
    if !run.log.spectrum.is_empty() {
        run.log.write_spectrum(&dir.join("spectrum.csv"))?;
    }
    Ok(())
}

fn cmd_train(args: &RunArgs, adjust: impl FnOnce(&mut ExperimentConfig)) -> Result<i32> {
    let mut cfg = load_config(&args.config, &overrides(args)?)?;
    adjust(&mut cfg);
    let start = Instant::now();
    let run = train_from_config(&cfg)?;
    write_run(&run, &cfg.output_dir)?;
    if let Some(e) = &run.divergence {
        eprintln!("error: {e}; last finite weights saved to {}", cfg.output_dir.join(CHECKPOINT_FILE).display());
        return Ok(EXIT_DIVERGED);
    }
    if let Some(last) = run.log.epochs.last() {
        println!(
            "epochs={} clean_acc={} robust_acc={} train_loss={} seconds={:.1}",
            last.epoch,
            last.clean_acc,
            last.robust_acc,
            last.train_loss,
            start.elapsed().as_secs_f64()
        );
    }
    println!("wrote {}", cfg.output_dir.display());
    Ok(EXIT_OK)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let net = MlpNetwork::load(&args.checkpoint)?;
    let cfg = match &args.config {
        Some(p) => load_config(p, &[])?,
        None => ExperimentConfig::default(),
    };
    let (ds, norm) = match &args.dataset {
        Some(p) => {
            let raw = load_csv(p)?;
            if cfg.normalize {
                let (d, n) = normalize_center(&raw);
                (d, Some(n))
            } else {
                (raw, None)
            }
        }
        None => cfg.dataset()?,
    };
    if ds.dim() != net.input_dim() {
        return Err(Error::Dimension { expected: net.input_dim(), actual: ds.dim(), context: "dataset features vs checkpoint" });
    }
    if ds.num_classes > net.num_classes() {
        return Err(Error::Dimension { expected: net.num_classes(), actual: ds.num_classes, context: "dataset classes vs checkpoint" });
    }
    let mut attack = cfg.eval_attack_for(norm.as_ref());
    if let Some(n) = args.norm {
        attack.norm = match n {
            NormArg::Linf => Norm::Linf,
            NormArg::L2 => Norm::L2,
        };
    }
    if let Some(d) = args.delta {
        let d = norm.as_ref().map_or(d, |n| n.scale_radius(d));
        attack.step_size = if attack.delta > 0.0 { attack.step_size * d / attack.delta } else { 2.5 * d / attack.steps as f64 };
        attack.delta = d;
    }
    if let Some(s) = args.steps {
        attack.step_size = attack.step_size * attack.steps as f64 / s.max(1) as f64;
        attack.steps = s;
    }
    if let Some(r) = args.restarts {
        attack.restarts = r;
    }
    let seed = args.seed.unwrap_or(cfg.eval_seed);
    let clean = accuracy(&net, &ds.inputs, &ds.labels);
    let robust = eval_robust_accuracy(&net, &ds, &attack, seed)?;
    println!("clean_acc={clean} robust_acc={robust}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("eval.csv");
        let text = format!(
            "clean_acc,robust_acc,delta,steps,restarts,seed\n{clean},{robust},{},{},{},{seed}\n",
            attack.delta, attack.steps, attack.restarts
        );
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(EXIT_OK)
}

/// Held-out evaluation set: a fresh Two Moons draw with the next data seed,
/// or the training set for CSV data.
pub fn held_out(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::TwoMoons { n, noise, seed } => {
            let raw = two_moons(*n, *noise, seed.wrapping_add(1))?;
            Ok(if cfg.normalize { normalize_center(&raw).0 } else { raw })
        }
        DataSource::Csv { .. } => Ok(cfg.dataset()?.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub status: String,
}

/// One training run per value; every run uses the configured seed, so rows
/// differ only through the parameter.
pub fn sweep(base: &str, param: &str, values: &[String], extra: &[(String, String)]) -> Vec<SweepRow> {
    let key = match param {
        "lambda" => "trh.lambda",
        "gamma" => "train.gamma",
        other => other,
    };
    values
        .par_iter()
        .map(|value| {
            let mut ov = extra.to_vec();
            ov.push((key.to_string(), value.clone()));
            let trial = || -> Result<(f64, f64)> {
                let cfg = ExperimentConfig::parse_with_overrides(base, &ov)?;
                let run = train_from_config(&cfg)?;
                if let Some(e) = run.divergence {
                    return Err(e);
                }
                let test = held_out(&cfg)?;
                let norm = cfg.dataset()?.1;
                let attack = cfg.eval_attack_for(norm.as_ref());
                Ok((accuracy(&run.net, &test.inputs, &test.labels), eval_robust_accuracy(&run.net, &test, &attack, cfg.eval_seed)?))
            };
            match trial() {
                Ok((clean_acc, robust_acc)) => SweepRow { value: value.clone(), clean_acc, robust_acc, status: "ok".into() },
                Err(e) => SweepRow { value: value.clone(), clean_acc: f64::NAN, robust_acc: f64::NAN, status: e.to_string() },
            }
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    if args.values.len() < 2 {
        return Err(Error::config("--values", None, "a sweep needs at least two values"));
    }
    let text = std::fs::read_to_string(&args.run.config).map_err(|e| Error::io(&args.run.config, e))?;
    let extra = overrides(&args.run)?;
    let cfg = ExperimentConfig::parse_with_overrides(&text, &extra)?;
    let rows = sweep(&text, &args.param, &args.values, &extra);
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    w.write_record(["value", "clean_acc", "robust_acc", "status"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([r.value.clone(), r.clean_acc.to_string(), r.robust_acc.to_string(), r.status.clone()]).map_err(csv_err)?;
        println!("{}={} clean_acc={} robust_acc={} status={}", args.param, r.value, r.clean_acc, r.robust_acc, r.status);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {} trials failed", rows.len());
    }
    Ok(EXIT_OK)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let fault = args.inject_fault.as_deref().map(str::parse::<Fault>).transpose()?;
    let level = match args.level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    };
    let start = Instant::now();
    let reports = run_suite(level, &FormulaSet { fault }, args.seed);
    for r in &reports {
        println!("{r}");
    }
    let ok = reports.iter().all(|r| r.passed());
    println!("verify status={} seconds={:.1}", if ok { "pass" } else { "fail" }, start.elapsed().as_secs_f64());
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY_FAILED })
}
