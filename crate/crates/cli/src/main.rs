//! `maas` command line: train, evaluate, sample and inspect supernets.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 backend.

use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maas_core::executor::Checker;
use maas_core::harness::{
    build_mutator, inspect, load_dataset, run_eval, run_train, sample_query, Checkpoint, EnvSpec,
    EvalSplit, FailureClass, HarnessError, TrainOptions,
};
use maas_core::optimizer::{MutatorKind, TrainConfig};
use maas_core::sampler::SampleMode;

const DEFAULT_PROBES: &[&str] = &[
    "What is 7 + 5?",
    "Translate 'good morning' into French.",
    "A train travels 120 km in 1.5 hours, stops for 20 minutes, then covers another 80 km at the same speed. How long is the whole trip?",
    "Write a function that returns the longest palindromic substring of a string.",
    "Which element has the highest melting point, and in what year was it first isolated?",
];

#[derive(Parser)]
#[command(name = "maas", version, about = "Query-conditioned agentic supernet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supernet on the train split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with deterministic selection.
    Eval(EvalArgs),
    /// Sample one architecture for a query.
    Sample(SampleArgs),
    /// Print per-layer mean operator scores over a probe set.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Synthetic,
    Live,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckerArg {
    Exact,
    Numeric,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutatorArg {
    None,
    Mock,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Test,
    All,
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    env: EnvKind,
    /// Operator profiles for the synthetic environment.
    #[arg(long, required_if_eq("env", "synthetic"))]
    env_profile: Option<PathBuf>,
    /// Answer comparison for the live environment.
    #[arg(long, value_enum, default_value = "exact")]
    checker: CheckerArg,
}

impl EnvArgs {
    fn spec(&self) -> EnvSpec {
        match self.env {
            EnvKind::Synthetic => EnvSpec::Synthetic {
                profiles: self.env_profile.clone().expect("clap enforces --env-profile"),
            },
            EnvKind::Live => EnvSpec::Live {
                checker: match self.checker {
                    CheckerArg::Exact => Checker::ExactMatch,
                    CheckerArg::Numeric => Checker::Numeric,
                },
            },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 0.3)]
    thres: f64,
    #[arg(long, default_value_t = 5e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 4)]
    samples_k: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Passes over the train split.
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Steps between operator patches; 0 disables patching.
    #[arg(long, default_value_t = 10)]
    patch_every: usize,
    #[arg(long, value_enum, default_value = "none")]
    mutator: MutatorArg,
    /// Chat model used by the LLM mutator.
    #[arg(long, default_value = "gpt-4o-mini")]
    mutator_model: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    /// `test` evaluates the held-out split under the checkpoint's seed.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Also write one JSON line per query to stderr.
    #[arg(long)]
    per_query: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    query: String,
    /// Print edges, log-probability and per-layer scores.
    #[arg(long)]
    explain: bool,
    /// Sample stochastically instead of the deterministic rule.
    #[arg(long)]
    train: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe query; repeatable.
    #[arg(long = "probe")]
    probes: Vec<String>,
    /// Dataset whose queries are used as probes.
    #[arg(long)]
    probes_from: Option<PathBuf>,
}

fn io_error(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn print_json(value: &impl serde::Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(io_error(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn train(args: TrainArgs) -> Result<(), HarnessError> {
    let config = TrainConfig {
        layers: args.layers,
        thres: args.thres,
        lambda: args.lambda,
        samples_k: args.samples_k,
        lr: args.lr,
        iterations: args.iterations,
        seed: args.seed,
        hidden: args.hidden,
        patch_every: (args.patch_every > 0).then_some(args.patch_every),
        mutator: match args.mutator {
            MutatorArg::None => MutatorKind::None,
            MutatorArg::Mock => MutatorKind::Mock,
            MutatorArg::Llm => MutatorKind::Llm,
        },
    };
    let env = args.env.spec().build()?;
    let mutator = build_mutator(config.mutator, &args.mutator_model)?;
    let opts = TrainOptions { metrics_out: args.metrics_out, ..TrainOptions::new(config) };
    let ckpt = run_train(&opts, &args.dataset, env.as_ref(), mutator)?;
    ckpt.save(&args.checkpoint)?;
    print_json(&ckpt.metrics_summary)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), HarnessError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let env = args.env.spec().build()?;
    let split = match args.split {
        SplitArg::Test => EvalSplit::Test,
        SplitArg::All => EvalSplit::All,
    };
    let run = run_eval(&ckpt, &args.dataset, env.as_ref(), split)?;
    if args.per_query {
        for o in &run.outcomes {
            eprintln!("{}", serde_json::to_string(o).expect("outcome serializes"));
        }
    }
    if let Some(path) = &args.report_out {
        let mut text = serde_json::to_string_pretty(&run.report).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| io_error(path, e))?;
    }
    print_json(&run.report)?;
    Ok(())
}

fn sample(args: SampleArgs) -> Result<(), HarnessError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mode = if args.train { SampleMode::Train } else { SampleMode::Eval };
    let arch = sample_query(&ckpt, &args.query, mode, args.seed)?;
    if args.explain {
        print_json(&arch)?;
    } else {
        print_json(&serde_json::json!({
            "layers": arch.layers,
            "exit_layer": arch.exit_layer,
        }))?;
    }
    Ok(())
}

fn inspect_cmd(args: InspectArgs) -> Result<(), HarnessError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut probes = args.probes;
    if let Some(path) = &args.probes_from {
        probes.extend(load_dataset(path)?.into_iter().map(|r| r.query));
    }
    if probes.is_empty() {
        probes = DEFAULT_PROBES.iter().map(|s| s.to_string()).collect();
    }
    print_json(&inspect(&ckpt, &probes)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Inspect(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                FailureClass::Usage => 2,
                FailureClass::Data => 3,
                FailureClass::Backend => 4,
            })
        }
    }
}
