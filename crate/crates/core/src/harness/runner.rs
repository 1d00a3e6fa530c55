//! Training and evaluation loops over datasets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, MetricsSummary, FORMAT_VERSION};
use super::dataset::{load_dataset, split_dataset};
use super::HarnessError;
use crate::controller::select_deterministic;
use crate::embedding::{layer_feature, EmbeddingConfig, OperatorEmbeddings};
use crate::executor::{execute, Environment, QueryRecord};
use crate::optimizer::{exit_depth, Mutator, StepMetrics, TrainConfig, Trainer};
use crate::registry::Registry;
use crate::sampler::{Architecture, SampleMode, SamplingContext};

const ORDER_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub registry: Registry,
    pub metrics_out: Option<PathBuf>,
}

impl TrainOptions {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            embedding: EmbeddingConfig::default(),
            registry: Registry::builtin(),
            metrics_out: None,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

/// `config.iterations` passes over `train`, reshuffled every pass. Calls
/// `on_step` after every step.
pub fn train_records(
    opts: &TrainOptions,
    train: &[QueryRecord],
    env: &dyn Environment,
    mutator: Option<Box<dyn Mutator>>,
    mut on_step: impl FnMut(&StepMetrics) -> Result<(), HarnessError>,
) -> Result<Checkpoint, HarnessError> {
    let embedder = opts.embedding.build()?;
    let mut trainer = Trainer::new(opts.config.clone(), opts.registry.clone(), embedder, mutator)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.config.seed);
    order_rng.set_stream(ORDER_STREAM);

    let (mut utility, mut cost, mut patches) = (0.0, 0.0, 0);
    let mut order: Vec<&QueryRecord> = train.iter().collect();
    for _ in 0..opts.config.iterations {
        order.shuffle(&mut order_rng);
        for query in &order {
            let m = trainer.train_step(query, env)?;
            utility += m.mean_utility;
            cost += m.mean_cost;
            patches += m.patches_applied;
            on_step(&m)?;
        }
    }
    let steps = trainer.step();
    let metrics_summary = (steps > 0).then(|| MetricsSummary {
        steps,
        mean_utility: utility / steps as f64,
        mean_cost: cost / steps as f64,
        patches_applied: patches,
    });
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        config: opts.config.clone(),
        embedding: opts.embedding.clone(),
        registry: trainer.registry.clone(),
        controllers: trainer.state.clone(),
        rng_state: Some(trainer.rng().clone()),
        metrics_summary,
    })
}

/// Loads `dataset`, trains on its train split and writes one JSON line per
/// step to `opts.metrics_out`.
pub fn run_train(
    opts: &TrainOptions,
    dataset: &Path,
    env: &dyn Environment,
    mutator: Option<Box<dyn Mutator>>,
) -> Result<Checkpoint, HarnessError> {
    opts.config.validate()?;
    let records = load_dataset(dataset)?;
    let (train, _) = split_dataset(&records, opts.config.seed)?;
    let mut sink = match &opts.metrics_out {
        Some(path) => Some((BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?), path)),
        None => None,
    };
    let ckpt = train_records(opts, &train, env, mutator, |m| {
        if let Some((w, path)) = &mut sink {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| io_error(path, e))?;
        }
        Ok(())
    })?;
    if let Some((mut w, path)) = sink {
        w.flush().map_err(|e| io_error(path, e))?;
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Held-out split under the checkpoint's seed.
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_cost: f64,
    pub mean_llm_calls: f64,
    /// `exit_histogram[d - 1]` counts queries that stopped at depth `d`.
    pub exit_histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub difficulty: f64,
    pub utility: f64,
    pub cost: f64,
    pub llm_calls: u64,
    pub exit_depth: usize,
    pub layers: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub outcomes: Vec<QueryOutcome>,
}

/// Deterministic-selection evaluation. Environment randomness comes from a
/// stream seeded by the checkpoint, so repeated evaluations agree.
pub fn eval_records(
    ckpt: &Checkpoint,
    records: &[QueryRecord],
    env: &dyn Environment,
) -> Result<EvalRun, HarnessError> {
    let embedder = ckpt.embedding.build()?;
    let operators = OperatorEmbeddings::compute(&ckpt.registry, embedder.as_ref())?;
    let ctx = SamplingContext::new(&ckpt.controllers, &ckpt.registry, &operators)?;
    let mut env_rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
    env_rng.set_stream(EVAL_STREAM);
    let mut unused = ChaCha8Rng::seed_from_u64(0);

    let mut outcomes = Vec::with_capacity(records.len());
    let mut exit_histogram = vec![0u64; ckpt.config.layers];
    for q in records {
        let qv = embedder.embed(&q.query)?;
        let arch = ctx.sample(&qv, ckpt.config.thres, SampleMode::Eval, &mut unused)?;
        let trace = execute(&arch, &ckpt.registry, q, env, &mut env_rng)?;
        let depth = exit_depth(&arch);
        exit_histogram[depth - 1] += 1;
        outcomes.push(QueryOutcome {
            query_id: q.id.clone(),
            difficulty: q.difficulty,
            utility: trace.utility,
            cost: trace.cost,
            llm_calls: trace.llm_calls,
            exit_depth: depth,
            layers: arch.layers,
        });
    }
    let n = outcomes.len();
    let mean = |f: &dyn Fn(&QueryOutcome) -> f64| {
        if n == 0 {
            0.0
        } else {
            outcomes.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let report = EvalReport {
        n,
        accuracy: mean(&|o| o.utility),
        mean_cost: mean(&|o| o.cost),
        mean_llm_calls: mean(&|o| o.llm_calls as f64),
        exit_histogram,
    };
    Ok(EvalRun { report, outcomes })
}

pub fn run_eval(
    ckpt: &Checkpoint,
    dataset: &Path,
    env: &dyn Environment,
    split: EvalSplit,
) -> Result<EvalRun, HarnessError> {
    let records = load_dataset(dataset)?;
    let records = match split {
        EvalSplit::All => records,
        EvalSplit::Test => split_dataset(&records, ckpt.config.seed)?.1,
    };
    eval_records(ckpt, &records, env)
}

/// Samples one architecture for free text. `Train` mode draws from `seed`.
pub fn sample_query(
    ckpt: &Checkpoint,
    query: &str,
    mode: SampleMode,
    seed: u64,
) -> Result<Architecture, HarnessError> {
    let embedder = ckpt.embedding.build()?;
    let operators = OperatorEmbeddings::compute(&ckpt.registry, embedder.as_ref())?;
    let ctx = SamplingContext::new(&ckpt.controllers, &ckpt.registry, &operators)?;
    let qv = embedder.embed(query)?;
    Ok(ctx.sample(&qv, ckpt.config.thres, mode, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    /// Probes whose deterministic path reached this layer.
    pub reached: usize,
    /// Mean score vector over those probes, indexed like `operators`.
    pub mean_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub version: u64,
    pub param_count: usize,
    pub operators: Vec<String>,
    pub layers: Vec<LayerSummary>,
}

/// Per-layer mean scores along each probe's deterministic path.
pub fn inspect(ckpt: &Checkpoint, probes: &[String]) -> Result<InspectReport, HarnessError> {
    let embedder = ckpt.embedding.build()?;
    let operators = OperatorEmbeddings::compute(&ckpt.registry, embedder.as_ref())?;
    let state = &ckpt.controllers;
    let exit = ckpt.registry.exit_index();
    let n_ops = ckpt.registry.len();
    let mut sums = vec![vec![0.0; n_ops]; state.depth()];
    let mut reached = vec![0usize; state.depth()];
    for probe in probes {
        let qv = embedder.embed(probe)?;
        let mut history: Vec<Vec<f64>> = Vec::new();
        for layer in 1..=state.depth() {
            let feature = layer_feature(&qv, &history)?;
            let scores = state.score_layer(layer, &feature)?;
            reached[layer - 1] += 1;
            for (s, x) in sums[layer - 1].iter_mut().zip(&scores.scores) {
                *s += x;
            }
            let selection = select_deterministic(&scores.scores, ckpt.config.thres);
            if exit.is_some_and(|e| selection.contains(&e)) {
                break;
            }
            history.push(operators.layer_sum(&selection));
        }
    }
    let layers = sums
        .into_iter()
        .zip(&reached)
        .enumerate()
        .map(|(i, (sum, &n))| LayerSummary {
            layer: i + 1,
            reached: n,
            mean_scores: sum.into_iter().map(|s| if n == 0 { 0.0 } else { s / n as f64 }).collect(),
        })
        .collect();
    Ok(InspectReport {
        version: state.version,
        param_count: state.param_count(),
        operators: ckpt.registry.operators().iter().map(|o| o.id.clone()).collect(),
        layers,
    })
}
