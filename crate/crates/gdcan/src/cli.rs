//! Subcommands. Each returns `Ok(())` or a [`Failure`] carrying the exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gdcan_core::checks::{case_names, run_suite};
use gdcan_core::data::{generate, LabeledImageSet};
use gdcan_core::diagnostics::attention_diff_report;
use gdcan_core::gradcheck::GradCheckOptions;
use gdcan_core::model::accuracy;
use gdcan_core::routing::{routing_report, LambdaSchedule};
use gdcan_core::tape::OpKind;
use gdcan_core::train::{TrainOutput, Trainer, EVAL_CHUNK};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset;
use crate::report::{self, ModelFile, SweepRow};

pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Check(_) => EXIT_CHECK,
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl From<gdcan_core::Error> for Failure {
    fn from(e: gdcan_core::Error) -> Self {
        match e {
            gdcan_core::Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Usage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "gdcan", version, about = "Domain-conditioned channel attention for unsupervised domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured benchmark and write model, metrics and reports.
    Train(RunArgs),
    /// Finite-difference check of every primitive and the full objective.
    Gradcheck(GradcheckArgs),
    /// Per-channel attention difference of a trained model, as CSV.
    ReportAttention(ModelArgs),
    /// One training run per threshold; writes a separation and accuracy table.
    SweepLambda(SweepArgs),
    /// Generate the source and target sets as DCDS files.
    GenData(RunArgs),
    /// Accuracy of a trained model on the source and target sets.
    Eval(ModelArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the training seed (the data seed for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated case names; all cases when omitted.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub only: Option<Vec<String>>,
    /// Corrupt the backward pass of one operation to exercise the checker.
    #[arg(long)]
    pub inject_fault: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Replaces the run configuration stored in the model file (data section).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// DCDS source set; regenerated from the configuration when omitted.
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    /// DCDS target set.
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,0.8,1")]
    pub lambdas: Vec<f64>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ReportAttention(a) => cmd_report_attention(&a),
        Command::SweepLambda(a) => cmd_sweep(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
    Ok(dir)
}

/// Trains and writes every artifact of one run into `dir`.
pub fn train_into(cfg: &RunConfig, dir: &Path, quiet: bool) -> Result<TrainOutput, Failure> {
    let started = report::unix_now();
    let (source, target) = generate(&cfg.data)?;
    let trainer = Trainer::new(&cfg.train, &source, &target)?;
    let out = trainer.run_with(|m| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  L_s {:.4}  L_M {:.4}  L_reg {:.4}  L_e {:.4}  src {:.3}  tgt {:.3}",
                m.epoch, m.l_s, m.l_m, m.l_reg, m.l_e, m.src_acc, m.tgt_acc
            );
        }
    })?;
    let io = io_failure(dir);
    report::write_config(dir, cfg).map_err(&io)?;
    report::write_metrics(dir, &out.metrics).map_err(&io)?;
    if cfg.reports.steps_jsonl {
        report::write_steps(dir, &out.steps).map_err(&io)?;
    }
    if cfg.reports.routing_csv {
        report::write_routing(dir, &out.decisions).map_err(&io)?;
    }
    if cfg.reports.attention_csv {
        let diff = attention_diff_report(&out.model, &source.images, &target.images, &cfg.train.policy(), EVAL_CHUNK)?;
        report::write_attention(dir, &diff).map_err(&io)?;
    }
    let file = ModelFile {
        run: cfg.clone(),
        model: out.model.clone(),
    };
    report::write_model(dir, &file).map_err(&io)?;
    report::write_run_info(dir, "train", started).map_err(&io)?;
    Ok(out)
}

fn cmd_train(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let dir = out_dir(args, &cfg)?;
    let out = train_into(&cfg, &dir, false)?;
    let last = out.final_metrics();
    println!("source accuracy {:.4}, target accuracy {:.4}; artifacts in {}", last.src_acc, last.tgt_acc, dir.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let selection: Vec<String> = match &args.only {
        None => Vec::new(),
        Some(names) => {
            let names: Vec<String> = names.iter().map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect();
            if names.is_empty() {
                return Err(Failure::Usage("--only selects no cases".into()));
            }
            let known = case_names();
            if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
                return Err(Failure::Usage(format!("unknown case {bad:?}; known: {}", known.join(", "))));
            }
            names
        }
    };
    let fault = match &args.inject_fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown operation {name:?}")))?),
    };
    let refs: Vec<&str> = selection.iter().map(String::as_str).collect();
    let opts = GradCheckOptions {
        seed: args.seed,
        ..GradCheckOptions::default()
    };
    let results = run_suite(&refs, fault, &opts)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.report.pass { "ok" } else { "FAIL" };
        println!(
            "{:<20} {:>4}  max rel error {:.3e}  ({} coordinates, {} at kinks)",
            r.name,
            status,
            r.report.max_rel_error,
            r.report.checked,
            r.report.nondifferentiable.len()
        );
        if !r.report.pass {
            failed.push(format!("{} (max rel error {:.3e})", r.name, r.report.max_rel_error));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Model file plus the evaluation sets it should be scored on.
fn model_and_sets(args: &ModelArgs) -> Result<(ModelFile, LabeledImageSet, LabeledImageSet), Failure> {
    let mut file = report::read_model(&args.model).map_err(Failure::Usage)?;
    if let Some(p) = &args.config {
        file.run.data = RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?.data;
    }
    let (source, target) = match (&args.source, &args.target) {
        (Some(s), Some(t)) => {
            let load = |p: &Path| dataset::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())));
            (load(s)?, load(t)?)
        }
        _ => generate(&file.run.data)?,
    };
    Ok((file, source, target))
}

fn cmd_report_attention(args: &ModelArgs) -> Result<(), Failure> {
    let (file, source, target) = model_and_sets(args)?;
    let diff = attention_diff_report(&file.model, &source.images, &target.images, &file.run.train.policy(), EVAL_CHUNK)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_failure(dir))?;
            report::write_attention(dir, &diff).map_err(io_failure(dir))?;
        }
        None => print!("{}", diff.to_csv()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalResult {
    src_acc: f64,
    tgt_acc: f64,
    routes: Vec<bool>,
}

fn cmd_eval(args: &ModelArgs) -> Result<(), Failure> {
    let (mut file, source, target) = model_and_sets(args)?;
    let policy = file.run.train.policy();
    let routes = file.model.frozen_routes(&policy);
    let (ps, pt) = file.model.predict(&source.images, &target.images, &policy, EVAL_CHUNK)?;
    let result = EvalResult {
        src_acc: accuracy(&ps, &source.labels),
        tgt_acc: accuracy(&pt, &target.labels),
        routes,
    };
    let text = serde_json::to_string_pretty(&result).expect("result serializes") + "\n";
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_failure(dir))?;
            fs::write(dir.join("eval.json"), &text).map_err(io_failure(dir))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen_data(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    let dir = out_dir(args, &cfg)?;
    let (source, target) = generate(&cfg.data)?;
    for (name, set) in [("source.dcds", &source), ("target.dcds", &target)] {
        let path = dir.join(name);
        dataset::save(set, &path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    println!("wrote {} + {} images to {}", source.len(), target.len(), dir.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let base = load_config(&args.run)?;
    let dir = out_dir(&args.run, &base)?;
    if args.lambdas.is_empty() || args.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Failure::Usage("lambdas must lie in [0, 1]".into()));
    }
    let started = report::unix_now();
    let mut rows = Vec::new();
    for &lambda in &args.lambdas {
        let mut cfg = base.clone();
        cfg.train.lambda = LambdaSchedule::Constant(lambda);
        let sub = dir.join(format!("lambda_{lambda}"));
        fs::create_dir_all(&sub).map_err(io_failure(&sub))?;
        eprintln!("lambda {lambda}");
        let out = train_into(&cfg, &sub, true)?;
        let policy = cfg.train.policy();
        let separation_fraction = routing_report(&out.decisions).map(|r| r.overall_fraction()).unwrap_or(0.0);
        rows.push(SweepRow {
            lambda,
            separation_count: out.model.frozen_routes(&policy).iter().filter(|&&r| r).count(),
            separation_fraction,
            target_accuracy: out.final_metrics().tgt_acc,
        });
    }
    let csv = report::sweep_csv(&rows);
    fs::write(dir.join(report::SWEEP_FILE), &csv).map_err(io_failure(&dir))?;
    report::write_run_info(&dir, "sweep-lambda", started).map_err(io_failure(&dir))?;
    print!("{csv}");
    Ok(())
}
