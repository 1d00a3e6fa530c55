//! Per-query architecture sampling and DAG construction.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    sample_selection, select_deterministic, selection_log_prob, ControllerError, SupernetGradient,
    SupernetState,
};
use crate::embedding::{layer_feature, EmbeddingError, EmbeddingVector, OperatorEmbeddings};
use crate::registry::{Registry, RegistryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("architecture was sampled under parameter version {sampled}, current is {current}")]
    StaleArchitecture { sampled: u64, current: u64 },
    #[error("controller scores {controller} operators but the registry holds {registry}")]
    OperatorCountMismatch { controller: usize, registry: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Stochastic sequential sampling.
    Train,
    /// Deterministic highest-score prefix.
    Eval,
}

/// What the controller decided at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: usize,
    /// Registry indices in draw order, including a co-selected exit.
    pub selection: Vec<usize>,
    pub scores: Vec<f64>,
    pub log_prob: f64,
}

/// A node of the executable graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum NodeRef {
    Source,
    Op { layer: usize, id: String },
    Sink,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Source => write!(f, "source"),
            NodeRef::Op { layer, id } => write!(f, "L{layer}:{id}"),
            NodeRef::Sink => write!(f, "sink"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeRef,
    pub to: NodeRef,
}

/// One sampled multi-agent system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Operator ids per executed layer. Never contains the exit operator.
    pub layers: Vec<Vec<String>>,
    /// Layer at which the exit operator was selected, if any.
    pub exit_layer: Option<usize>,
    pub edges: Vec<Edge>,
    /// Sum of per-layer selection log-probabilities, exit layer included.
    pub log_prob: f64,
    pub decisions: Vec<LayerDecision>,
    pub mode: SampleMode,
    pub params_version: u64,
}

impl Architecture {
    /// Number of executed layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn instances(&self) -> impl Iterator<Item = NodeRef> + '_ {
        self.layers.iter().enumerate().flat_map(|(l, ids)| {
            ids.iter().map(move |id| NodeRef::Op {
                layer: l + 1,
                id: id.clone(),
            })
        })
    }
}

/// Read-only view over everything sampling needs.
#[derive(Clone, Copy)]
pub struct SamplingContext<'a> {
    pub state: &'a SupernetState,
    pub registry: &'a Registry,
    pub operators: &'a OperatorEmbeddings,
}

impl<'a> SamplingContext<'a> {
    pub fn new(
        state: &'a SupernetState,
        registry: &'a Registry,
        operators: &'a OperatorEmbeddings,
    ) -> Result<Self, SamplerError> {
        registry.validate_complete()?;
        if state.n_ops() != registry.len() || operators.len() != registry.len() {
            return Err(SamplerError::OperatorCountMismatch {
                controller: state.n_ops(),
                registry: registry.len(),
            });
        }
        Ok(Self { state, registry, operators })
    }

    fn feature(&self, query: &EmbeddingVector, history: &[&[usize]]) -> Result<Vec<f64>, SamplerError> {
        let sums: Vec<Vec<f64>> = history.iter().map(|m| self.operators.layer_sum(m)).collect();
        Ok(layer_feature(query, &sums)?)
    }

    /// Samples layers until the exit operator is selected or the maximum
    /// depth is reached.
    pub fn sample(
        &self,
        query: &EmbeddingVector,
        thres: f64,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<Architecture, SamplerError> {
        let exit = self.registry.exit_index().expect("validated");
        let direct_io = self.registry.direct_io_index().expect("validated");
        let mut decisions: Vec<LayerDecision> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut exit_layer = None;

        for layer in 1..=self.state.depth() {
            let history: Vec<&[usize]> = members.iter().map(Vec::as_slice).collect();
            let feature = self.feature(query, &history)?;
            let scores = self.state.score_layer(layer, &feature)?;
            let (selection, log_prob) = match mode {
                SampleMode::Train => sample_selection(&scores, thres, rng),
                SampleMode::Eval => {
                    let sel = select_deterministic(&scores.scores, thres);
                    let lp = selection_log_prob(&scores.logits, &sel)?;
                    (sel, lp)
                }
            };
            let exits = selection.contains(&exit);
            decisions.push(LayerDecision {
                layer,
                selection: selection.clone(),
                scores: scores.scores,
                log_prob,
            });
            if exits {
                exit_layer = Some(layer);
                break;
            }
            members.push(selection);
        }

        if exit_layer == Some(1) {
            members = vec![vec![direct_io]];
        }
        let layers = members
            .iter()
            .map(|m| m.iter().map(|&i| self.registry.operators()[i].id.clone()).collect())
            .collect();
        let mut arch = Architecture {
            layers,
            exit_layer,
            edges: Vec::new(),
            log_prob: decisions.iter().map(|d| d.log_prob).sum(),
            decisions,
            mode,
            params_version: self.state.version,
        };
        arch.edges = build_dag(&arch, self.registry);
        Ok(arch)
    }

    /// Features and selections of every decision, recomputed from the
    /// architecture's own history.
    fn replay<'b>(
        &self,
        query: &EmbeddingVector,
        arch: &'b Architecture,
    ) -> Result<Vec<(Vec<f64>, &'b LayerDecision)>, SamplerError> {
        if arch.params_version != self.state.version {
            return Err(SamplerError::StaleArchitecture {
                sampled: arch.params_version,
                current: self.state.version,
            });
        }
        let mut out = Vec::with_capacity(arch.decisions.len());
        for (i, d) in arch.decisions.iter().enumerate() {
            let history: Vec<&[usize]> =
                arch.decisions[..i].iter().map(|p| p.selection.as_slice()).collect();
            out.push((self.feature(query, &history)?, d));
        }
        Ok(out)
    }

    /// Recomputes `Σ_ℓ log p(selection_ℓ)` under the current parameters.
    pub fn log_prob(&self, query: &EmbeddingVector, arch: &Architecture) -> Result<f64, SamplerError> {
        let mut total = 0.0;
        for (feature, d) in self.replay(query, arch)? {
            let scores = self.state.score_layer(d.layer, &feature)?;
            total += selection_log_prob(&scores.logits, &d.selection)?;
        }
        Ok(total)
    }

    /// `∇_φ log p(arch)`; layers after the last decision get zero gradient.
    pub fn grad_log_prob(
        &self,
        query: &EmbeddingVector,
        arch: &Architecture,
    ) -> Result<SupernetGradient, SamplerError> {
        let mut grad = self.state.zero_gradient();
        for (feature, d) in self.replay(query, arch)? {
            let g = self.state.grad_log_prob(d.layer, &feature, &d.selection)?;
            grad.add_layer(&g, 1.0)?;
        }
        Ok(grad)
    }
}

/// Source → every layer-1 instance, complete bipartite wiring between
/// consecutive layers, every final-layer instance → sink. Rewired operators
/// beyond layer 1 also receive a skip edge from the source.
pub fn build_dag(arch: &Architecture, registry: &Registry) -> Vec<Edge> {
    let node = |layer: usize, id: &str| NodeRef::Op {
        layer,
        id: id.to_string(),
    };
    let mut edges = Vec::new();
    let Some(first) = arch.layers.first() else {
        return edges;
    };
    for id in first {
        edges.push(Edge { from: NodeRef::Source, to: node(1, id) });
    }
    for (i, pair) in arch.layers.windows(2).enumerate() {
        let (layer, next) = (i + 1, i + 2);
        for to in &pair[1] {
            if registry.by_id(to).is_some_and(|op| op.rewire) {
                edges.push(Edge { from: NodeRef::Source, to: node(next, to) });
            }
            for from in &pair[0] {
                edges.push(Edge { from: node(layer, from), to: node(next, to) });
            }
        }
    }
    let last = arch.layers.len();
    for id in &arch.layers[last - 1] {
        edges.push(Edge { from: node(last, id), to: NodeRef::Sink });
    }
    edges
}

/// Kahn's algorithm; returns `None` when the edges contain a cycle. Ties are
/// resolved in order of first appearance.
pub fn topological_order(edges: &[Edge]) -> Option<Vec<NodeRef>> {
    let mut nodes: Vec<&NodeRef> = Vec::new();
    let mut index: HashMap<&NodeRef, usize> = HashMap::new();
    for e in edges {
        for n in [&e.from, &e.to] {
            index.entry(n).or_insert_with(|| {
                nodes.push(n);
                nodes.len() - 1
            });
        }
    }
    let mut indegree = vec![0usize; nodes.len()];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for e in edges {
        let (a, b) = (index[&e.from], index[&e.to]);
        out[a].push(b);
        indegree[b] += 1;
    }
    let mut queue: VecDeque<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = queue.pop_front() {
        order.push(nodes[i].clone());
        for &j in &out[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                queue.push_back(j);
            }
        }
    }
    (order.len() == nodes.len()).then_some(order)
}
