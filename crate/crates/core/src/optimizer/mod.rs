//! Joint optimization of the controller distribution and the operators.
//!
//! One training step samples `K` architectures for a query, executes them,
//! turns utilities and costs into importance weights and takes a plain SGD
//! ascent step on the weighted log-likelihood. Every `patch_every` steps a
//! mutator turns the recent failure window into operator patches.

pub mod mutator;

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerDims, ControllerError, SupernetGradient, SupernetState};
use crate::embedding::{Embedder, EmbeddingError, OperatorEmbeddings};
use crate::executor::{execute, Environment, ExecError, ExecutionTrace, QueryRecord};
use crate::registry::{Registry, RegistryError};
use crate::sampler::{Architecture, SampleMode, SamplerError, SamplingContext};

pub use mutator::{textual_gradient, LlmMutator, MockMutator, Mutator, ObservedTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("costs must be positive and finite, got {0}")]
    NonpositiveCost(f64),
    #[error("utilities must be non-negative and finite, got {0}")]
    NegativeUtility(f64),
    #[error("expected {expected} weights or gradients, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("a batch needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("traces in one batch must share the query")]
    MixedQueries,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("textual gradient needs at least one trace")]
    NoTraces,
    #[error("mutator unavailable: {0}")]
    MutatorUnavailable(String),
    #[error("unparseable mutation: {0}")]
    UnparseableMutation(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutatorKind {
    #[default]
    None,
    Mock,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layers: usize,
    pub thres: f64,
    pub lambda: f64,
    pub samples_k: usize,
    pub lr: f64,
    /// Passes over the training split.
    pub iterations: usize,
    pub seed: u64,
    pub hidden: usize,
    /// `None` never patches.
    pub patch_every: Option<usize>,
    pub mutator: MutatorKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            thres: 0.3,
            lambda: 5e-3,
            samples_k: 4,
            lr: 0.05,
            iterations: 200,
            seed: 0,
            hidden: 64,
            patch_every: Some(10),
            mutator: MutatorKind::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if self.layers < 1 {
            return bad("layers must be at least 1");
        }
        if !(self.thres > 0.0 && self.thres < 1.0) {
            return bad("thres must lie in (0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.samples_k < 2 {
            return bad("samples_k must be at least 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.hidden < 1 {
            return bad("hidden must be at least 1");
        }
        if self.patch_every == Some(0) {
            return bad("patch_every must be positive");
        }
        Ok(())
    }
}

/// `m_k = u_k / Σu − λ · c_k / Σc`. When every utility is zero the utility
/// term is `1/K` for each sample.
pub fn importance_weights(
    utilities: &[f64],
    costs: &[f64],
    lambda: f64,
) -> Result<Vec<f64>, OptimError> {
    if utilities.len() != costs.len() {
        return Err(OptimError::ShapeMismatch { expected: utilities.len(), got: costs.len() });
    }
    if let Some(&c) = costs.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(OptimError::NonpositiveCost(c));
    }
    if let Some(&u) = utilities.iter().find(|u| !(**u >= 0.0 && u.is_finite())) {
        return Err(OptimError::NegativeUtility(u));
    }
    let k = utilities.len() as f64;
    let su: f64 = utilities.iter().sum();
    let sc: f64 = costs.iter().sum();
    Ok(utilities
        .iter()
        .zip(costs)
        .map(|(u, c)| {
            let utility = if su > 0.0 { u / su } else { 1.0 / k };
            utility - lambda * (c / sc)
        })
        .collect())
}

/// `K ≥ 2` executions of one query with their `∇ log p` at sampling time.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub traces: Vec<ExecutionTrace>,
    pub log_prob_grads: Vec<SupernetGradient>,
}

impl BatchSample {
    pub fn new(
        traces: Vec<ExecutionTrace>,
        log_prob_grads: Vec<SupernetGradient>,
    ) -> Result<Self, OptimError> {
        if traces.len() < 2 {
            return Err(OptimError::TooFewSamples(traces.len()));
        }
        if log_prob_grads.len() != traces.len() {
            return Err(OptimError::ShapeMismatch {
                expected: traces.len(),
                got: log_prob_grads.len(),
            });
        }
        if traces.iter().any(|t| t.query_id != traces[0].query_id) {
            return Err(OptimError::MixedQueries);
        }
        Ok(Self { traces, log_prob_grads })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.traces.iter().map(|t| t.utility).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.traces.iter().map(|t| t.cost).collect()
    }
}

/// `φ ← φ + (lr/K) · Σ_k m_k ∇ log p(G_k)`. Bumps the parameter version even
/// when every weight is zero.
pub fn update_distribution(
    state: &mut SupernetState,
    batch: &BatchSample,
    weights: &[f64],
    lr: f64,
) -> Result<(), OptimError> {
    if weights.len() != batch.len() {
        return Err(OptimError::ShapeMismatch { expected: batch.len(), got: weights.len() });
    }
    let mut total = state.zero_gradient();
    for (g, &m) in batch.log_prob_grads.iter().zip(weights) {
        if m != 0.0 {
            total.add(g, m)?;
        }
    }
    state.apply_gradient(&total, lr / batch.len() as f64)?;
    Ok(())
}

/// Number of controller decisions made, i.e. the layer at which sampling
/// stopped.
pub fn exit_depth(arch: &Architecture) -> usize {
    arch.decisions.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub query_id: String,
    pub mean_utility: f64,
    pub mean_cost: f64,
    /// `exit_histogram[d - 1]` counts samples that stopped at depth `d`.
    pub exit_histogram: Vec<u64>,
    pub patches_applied: usize,
}

/// Executes `archs` concurrently, one seeded RNG stream per trace.
pub fn execute_batch(
    archs: &[Architecture],
    registry: &Registry,
    query: &QueryRecord,
    env: &dyn Environment,
    seeds: &[u64],
) -> Result<Vec<ExecutionTrace>, ExecError> {
    std::thread::scope(|s| {
        let handles: Vec<_> = archs
            .iter()
            .zip(seeds)
            .map(|(arch, &seed)| {
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    execute(arch, registry, query, env, &mut rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("executor thread panicked"))
            .collect()
    })
}

/// Owns the mutable supernet `(π, 𝕆)` during training. One writer at a time.
pub struct Trainer {
    pub state: SupernetState,
    pub registry: Registry,
    operators: OperatorEmbeddings,
    embedder: Arc<dyn Embedder>,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    window: Vec<ObservedTrace>,
    mutator: Option<Box<dyn Mutator>>,
}

impl Trainer {
    /// Fresh controller initialized from `config.seed`.
    pub fn new(
        config: TrainConfig,
        registry: Registry,
        embedder: Arc<dyn Embedder>,
        mutator: Option<Box<dyn Mutator>>,
    ) -> Result<Self, OptimError> {
        config.validate()?;
        registry.validate_complete()?;
        let operators = OperatorEmbeddings::compute(&registry, embedder.as_ref())?;
        let embed_dim = embedder.embed("")?.dim();
        let dims = ControllerDims {
            embed_dim,
            hidden: config.hidden,
            layers: config.layers,
            n_ops: registry.len(),
        };
        let state = SupernetState::init(config.seed, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            state,
            registry,
            operators,
            embedder,
            config,
            rng,
            step: 0,
            window: Vec::new(),
            mutator,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn operators(&self) -> &OperatorEmbeddings {
        &self.operators
    }

    /// Samples `K` architectures, executes them, updates `π`, and on the
    /// patch cadence updates `𝕆`.
    pub fn train_step(
        &mut self,
        query: &QueryRecord,
        env: &dyn Environment,
    ) -> Result<StepMetrics, OptimError> {
        let k = self.config.samples_k;
        let qv = self.embedder.embed(&query.query)?;
        let ctx = SamplingContext::new(&self.state, &self.registry, &self.operators)?;
        // fixed draw count per step: runs differing only in weights stay in
        // lockstep on randomness
        let sample_seeds: Vec<u64> = (0..k).map(|_| self.rng.next_u64()).collect();
        let seeds: Vec<u64> = (0..k).map(|_| self.rng.next_u64()).collect();
        let archs = sample_seeds
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                ctx.sample(&qv, self.config.thres, SampleMode::Train, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let grads = archs
            .iter()
            .map(|a| ctx.grad_log_prob(&qv, a))
            .collect::<Result<Vec<_>, _>>()?;
        let traces = execute_batch(&archs, &self.registry, query, env, &seeds)?;

        let batch = BatchSample::new(traces, grads)?;
        let weights = importance_weights(&batch.utilities(), &batch.costs(), self.config.lambda)?;
        update_distribution(&mut self.state, &batch, &weights, self.config.lr)?;
        self.step += 1;

        let mut exit_histogram = vec![0u64; self.config.layers];
        for t in &batch.traces {
            exit_histogram[exit_depth(&t.architecture) - 1] += 1;
        }
        let metrics_base = StepMetrics {
            step: self.step,
            query_id: query.id.clone(),
            mean_utility: batch.utilities().iter().sum::<f64>() / k as f64,
            mean_cost: batch.costs().iter().sum::<f64>() / k as f64,
            exit_histogram,
            patches_applied: 0,
        };
        self.window.extend(
            batch
                .traces
                .into_iter()
                .map(|trace| ObservedTrace { query: query.clone(), trace }),
        );

        let patches_applied = match self.config.patch_every {
            Some(every) if self.step.is_multiple_of(every as u64) => self.patch()?,
            _ => 0,
        };
        Ok(StepMetrics { patches_applied, ..metrics_base })
    }

    /// Runs the mutator over the window and applies its patches. Invalid
    /// patches are logged and skipped.
    fn patch(&mut self) -> Result<usize, OptimError> {
        let window = std::mem::take(&mut self.window);
        let Some(mutator) = &self.mutator else {
            return Ok(0);
        };
        if window.is_empty() {
            return Ok(0);
        }
        let patches = match textual_gradient(&self.registry, &window, mutator.as_ref()) {
            Ok(p) => p,
            Err(OptimError::UnparseableMutation(reason)) => {
                log::warn!("mutation skipped: {reason}");
                return Ok(0);
            }
            Err(e) => return Err(e),
        };
        let mut applied = 0;
        for patch in &patches {
            match self.registry.apply_patch(patch) {
                Ok(change) => {
                    self.state.apply_index_change(change, &mut self.rng);
                    applied += 1;
                    log::info!("patched operator `{}`", patch.target_id);
                }
                Err(e) => log::warn!("patch for `{}` rejected: {e}", patch.target_id),
            }
        }
        if applied > 0 {
            self.operators = OperatorEmbeddings::compute(&self.registry, self.embedder.as_ref())?;
        }
        Ok(applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashingEmbedder;
    use crate::executor::{SyntheticEnvironment, SyntheticOperatorProfile};

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn weight_examples() {
        let m = importance_weights(&[1.0, 1.0, 0.0, 0.0], &[2.0, 2.0, 1.0, 1.0], 0.01).unwrap();
        assert!(close(&m, &[0.5 - 0.01 / 3.0, 0.5 - 0.01 / 3.0, -0.01 / 6.0, -0.01 / 6.0]));
        let m = importance_weights(&[2.0, 1.0, 1.0, 0.0], &[1.0; 4], 0.0).unwrap();
        assert_eq!(m, vec![0.5, 0.25, 0.25, 0.0]);
        let m = importance_weights(&[0.0, 0.0], &[1.0, 1.0], 0.01).unwrap();
        assert!(close(&m, &[0.495, 0.495]));
    }

    #[test]
    fn weight_errors() {
        assert_eq!(
            importance_weights(&[1.0, 0.0], &[1.0, 0.0], 0.1),
            Err(OptimError::NonpositiveCost(0.0))
        );
        assert_eq!(
            importance_weights(&[-1.0, 0.0], &[1.0, 1.0], 0.1),
            Err(OptimError::NegativeUtility(-1.0))
        );
        assert!(matches!(
            importance_weights(&[1.0], &[1.0, 1.0], 0.1),
            Err(OptimError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for broken in [
            TrainConfig { layers: 0, ..Default::default() },
            TrainConfig { thres: 1.0, ..Default::default() },
            TrainConfig { lambda: -0.1, ..Default::default() },
            TrainConfig { samples_k: 1, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { patch_every: Some(0), ..Default::default() },
        ] {
            assert!(broken.validate().is_err(), "{broken:?}");
        }
    }

    fn uniform_env(base: f64) -> SyntheticEnvironment {
        let ids = ["io", "cot", "debate", "sc", "refine", "ensemble", "test", "react"];
        SyntheticEnvironment::new(
            ids.iter()
                .enumerate()
                .map(|(i, id)| SyntheticOperatorProfile {
                    operator_id: id.to_string(),
                    base_success: base,
                    difficulty_slope: 0.0,
                    unit_cost: 1.0 + i as f64,
                    combine_bonus: 0.0,
                    prompt_fix: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn query() -> QueryRecord {
        QueryRecord {
            id: "q".into(),
            query: "how many apples remain".into(),
            answer: "3".into(),
            domain: "math".into(),
            difficulty: 0.5,
        }
    }

    fn trainer(config: TrainConfig, mutator: Option<Box<dyn Mutator>>) -> Trainer {
        Trainer::new(config, Registry::builtin(), Arc::new(HashingEmbedder::default()), mutator)
            .unwrap()
    }

    fn sample_batch(t: &Trainer, seed: u64) -> (BatchSample, crate::embedding::EmbeddingVector) {
        let env = uniform_env(0.5);
        let q = query();
        let qv = HashingEmbedder::default().embed_text(&q.query);
        let ctx = SamplingContext::new(&t.state, &t.registry, t.operators()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let archs: Vec<_> = (0..2)
            .map(|_| ctx.sample(&qv, 0.3, SampleMode::Train, &mut rng).unwrap())
            .collect();
        let grads = archs.iter().map(|a| ctx.grad_log_prob(&qv, a).unwrap()).collect();
        let traces = execute_batch(&archs, &t.registry, &q, &env, &[1, 2]).unwrap();
        (BatchSample::new(traces, grads).unwrap(), qv)
    }

    #[test]
    fn zero_weights_leave_parameters_untouched() {
        let mut t = trainer(TrainConfig::default(), None);
        let (batch, _) = sample_batch(&t, 3);
        let before = t.state.clone();
        update_distribution(&mut t.state, &batch, &[0.0, 0.0], 0.05).unwrap();
        assert_eq!(t.state.layers, before.layers);
        assert_eq!(t.state.version, before.version + 1);
        assert!(matches!(
            update_distribution(&mut t.state, &batch, &[0.0], 0.05),
            Err(OptimError::ShapeMismatch { .. })
        ));
    }

    fn relog(t: &Trainer, qv: &crate::embedding::EmbeddingVector, arch: &Architecture) -> f64 {
        let mut a = arch.clone();
        a.params_version = t.state.version;
        SamplingContext::new(&t.state, &t.registry, t.operators())
            .unwrap()
            .log_prob(qv, &a)
            .unwrap()
    }

    fn regrad(t: &Trainer, qv: &crate::embedding::EmbeddingVector, arch: &Architecture) -> SupernetGradient {
        let mut a = arch.clone();
        a.params_version = t.state.version;
        SamplingContext::new(&t.state, &t.registry, t.operators())
            .unwrap()
            .grad_log_prob(qv, &a)
            .unwrap()
    }

    #[test]
    fn reinforcing_one_sample_increases_its_log_prob() {
        let mut t = trainer(TrainConfig::default(), None);
        let (batch, qv) = sample_batch(&t, 5);
        let arch = batch.traces[0].architecture.clone();
        let mut last = relog(&t, &qv, &arch);
        for _ in 0..100 {
            let g = regrad(&t, &qv, &arch);
            let b = BatchSample::new(
                vec![batch.traces[0].clone(), batch.traces[0].clone()],
                vec![g, t.state.zero_gradient()],
            )
            .unwrap();
            update_distribution(&mut t.state, &b, &[1.0, 0.0], 0.05).unwrap();
            let now = relog(&t, &qv, &arch);
            assert!(now > last || last > -1e-9, "{now} <= {last}");
            last = now;
        }
    }

    #[test]
    fn opposite_weights_widen_the_gap() {
        let mut t = trainer(TrainConfig::default(), None);
        let (batch, qv) = sample_batch(&t, 11);
        let (a1, a2) = (&batch.traces[0].architecture, &batch.traces[1].architecture);
        assert_ne!(a1.decisions, a2.decisions);
        let gap_before = relog(&t, &qv, a1) - relog(&t, &qv, a2);
        update_distribution(&mut t.state, &batch, &[1.0, -1.0], 0.05).unwrap();
        let gap_after = relog(&t, &qv, a1) - relog(&t, &qv, a2);
        assert!(gap_after > gap_before);
    }

    #[test]
    fn update_is_first_order_in_lr() {
        let t = trainer(TrainConfig::default(), None);
        let (batch, _) = sample_batch(&t, 13);
        let weights = [0.7, -0.2];
        let lr = 1e-6;
        let mut s = t.state.clone();
        update_distribution(&mut s, &batch, &weights, lr).unwrap();
        let mut delta = 0.0;
        for (a, b) in s.layers.iter().zip(&t.state.layers) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                delta += pa.iter().zip(pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
        let bound: f64 = lr
            * weights
                .iter()
                .zip(&batch.log_prob_grads)
                .map(|(m, g)| m.abs() * g.norm())
                .sum::<f64>();
        assert!(delta.sqrt() <= bound * (1.0 + 1e-9));
    }

    #[test]
    fn batch_invariants() {
        let t = trainer(TrainConfig::default(), None);
        let (batch, _) = sample_batch(&t, 17);
        let one = BatchSample::new(vec![batch.traces[0].clone()], vec![t.state.zero_gradient()]);
        assert_eq!(one.unwrap_err(), OptimError::TooFewSamples(1));
        let mut other = batch.traces[1].clone();
        other.query_id = "elsewhere".into();
        let mixed = BatchSample::new(
            vec![batch.traces[0].clone(), other],
            batch.log_prob_grads.clone(),
        );
        assert_eq!(mixed.unwrap_err(), OptimError::MixedQueries);
    }

    #[test]
    fn train_steps_are_reproducible() {
        let env = uniform_env(0.6);
        let run = || {
            let mut t = trainer(TrainConfig { seed: 9, ..Default::default() }, None);
            let metrics: Vec<_> = (0..20).map(|_| t.train_step(&query(), &env).unwrap()).collect();
            (serde_json::to_string(&metrics).unwrap(), t.state)
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
        let first: StepMetrics = serde_json::from_str::<Vec<StepMetrics>>(&m1).unwrap().remove(0);
        assert_eq!(first.exit_histogram.iter().sum::<u64>(), 4);
    }

    #[test]
    fn no_patch_cadence_keeps_registry() {
        let env = uniform_env(0.2);
        let config = TrainConfig { patch_every: None, mutator: MutatorKind::Mock, ..Default::default() };
        let mut t = trainer(config, Some(Box::new(MockMutator)));
        for _ in 0..30 {
            let m = t.train_step(&query(), &env).unwrap();
            assert_eq!(m.patches_applied, 0);
            assert_eq!(t.registry, Registry::builtin());
        }
    }

    #[test]
    fn mock_patches_apply_on_cadence() {
        let env = uniform_env(0.2);
        let config = TrainConfig { patch_every: Some(5), mutator: MutatorKind::Mock, ..Default::default() };
        let mut t = trainer(config, Some(Box::new(MockMutator)));
        let applied: Vec<usize> =
            (0..10).map(|_| t.train_step(&query(), &env).unwrap().patches_applied).collect();
        assert_eq!(applied.iter().sum::<usize>(), 2);
        assert_eq!(applied[4], 1);
        assert_ne!(t.registry, Registry::builtin());
    }
}
