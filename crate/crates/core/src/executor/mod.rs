//! Runs sampled architectures against an environment backend.
//!
//! Nodes of one trace run sequentially in topological order. Every operator
//! instance sees the query and the outputs of its DAG predecessors; the sink
//! majority-votes over the final layer.

pub mod checker;
pub mod live;
pub mod synthetic;

use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{OperatorSpec, Registry};
use crate::sampler::{build_dag, topological_order, Architecture, NodeRef};

pub use checker::Checker;
pub use live::{ChatClient, LiveEnvironment};
pub use synthetic::{SyntheticEnvironment, SyntheticOperatorProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("architecture has no layers to execute")]
    EmptyArchitecture,
    #[error("architecture graph is not a DAG")]
    CyclicArchitecture,
    #[error("operator `{0}` is not in the registry")]
    UnknownOperator(String),
    #[error("no synthetic profile for operator `{0}`")]
    MissingProfile(String),
    #[error("invalid synthetic profile: {0}")]
    InvalidProfile(String),
}

/// One query with its oracle answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub query: String,
    pub answer: String,
    pub domain: String,
    pub difficulty: f64,
}

/// Output and cost of a single operator invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRun {
    pub output: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeOutput {
    pub node: NodeRef,
    pub operator_index: usize,
    pub output: String,
    /// Whether this node's own output already matches the oracle.
    pub correct: bool,
    pub cost: f64,
    /// Position in execution order.
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub query_id: String,
    pub architecture: Architecture,
    pub node_outputs: Vec<NodeOutput>,
    pub final_answer: String,
    pub utility: f64,
    pub cost: f64,
    pub llm_calls: u64,
}

impl ExecutionTrace {
    pub fn output_of(&self, node: &NodeRef) -> Option<&NodeOutput> {
        self.node_outputs.iter().find(|n| &n.node == node)
    }
}

/// Backend that runs operators and scores answers.
pub trait Environment: Send + Sync {
    fn run_node(
        &self,
        op: &OperatorSpec,
        query: &QueryRecord,
        predecessors: &[NodeOutput],
        rng: &mut dyn RngCore,
    ) -> Result<NodeRun, ExecError>;

    /// Utility in `[0, 1]` of `answer` for `query`.
    fn evaluate(&self, answer: &str, query: &QueryRecord) -> f64;
}

/// Executes every operator instance of `arch` in topological order.
pub fn execute(
    arch: &Architecture,
    registry: &Registry,
    query: &QueryRecord,
    env: &dyn Environment,
    rng: &mut dyn RngCore,
) -> Result<ExecutionTrace, ExecError> {
    if arch.layers.is_empty() || arch.layers.iter().any(Vec::is_empty) {
        return Err(ExecError::EmptyArchitecture);
    }
    let edges = if arch.edges.is_empty() {
        build_dag(arch, registry)
    } else {
        arch.edges.clone()
    };
    let order = topological_order(&edges).ok_or(ExecError::CyclicArchitecture)?;

    let mut preds: HashMap<&NodeRef, Vec<&NodeRef>> = HashMap::new();
    for e in &edges {
        preds.entry(&e.to).or_default().push(&e.from);
    }

    let mut done: HashMap<NodeRef, NodeOutput> = HashMap::new();
    let mut outputs = Vec::new();
    let mut llm_calls = 0u64;
    for node in order {
        let NodeRef::Op { id, .. } = &node else {
            continue;
        };
        let index = registry
            .index_of(id)
            .ok_or_else(|| ExecError::UnknownOperator(id.clone()))?;
        let op = &registry.operators()[index];
        let inputs: Vec<NodeOutput> = preds
            .get(&node)
            .into_iter()
            .flatten()
            .filter_map(|p| done.get(*p).cloned())
            .collect();
        let run = env.run_node(op, query, &inputs, rng)?;
        llm_calls += u64::from(op.agent_count);
        let out = NodeOutput {
            node: node.clone(),
            operator_index: index,
            correct: env.evaluate(&run.output, query) >= 1.0,
            output: run.output,
            cost: run.cost,
            seq: outputs.len(),
        };
        done.insert(node, out.clone());
        outputs.push(out);
    }

    let finals: Vec<&NodeOutput> = preds
        .get(&NodeRef::Sink)
        .into_iter()
        .flatten()
        .filter_map(|p| done.get(*p))
        .collect();
    let final_answer = majority_vote(&finals).ok_or(ExecError::EmptyArchitecture)?;
    let utility = env.evaluate(&final_answer, query);
    let cost = outputs.iter().map(|n| n.cost).sum();
    Ok(ExecutionTrace {
        query_id: query.id.clone(),
        architecture: arch.clone(),
        node_outputs: outputs,
        final_answer,
        utility,
        cost,
        llm_calls,
    })
}

/// Most frequent output after whitespace normalization. Ties go to the group
/// holding the lowest operator index.
pub fn majority_vote(nodes: &[&NodeOutput]) -> Option<String> {
    let mut groups: Vec<(String, usize, usize, &str)> = Vec::new();
    for n in nodes {
        let key = checker::normalize(&n.output);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                g.1 += 1;
                if n.operator_index < g.2 {
                    g.2 = n.operator_index;
                    g.3 = &n.output;
                }
            }
            None => groups.push((key, 1, n.operator_index, &n.output)),
        }
    }
    groups
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)))
        .map(|g| g.3.trim().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SampleMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(layers: &[&[&str]]) -> Architecture {
        Architecture {
            layers: layers
                .iter()
                .map(|l| l.iter().map(|s| s.to_string()).collect())
                .collect(),
            exit_layer: None,
            edges: Vec::new(),
            log_prob: 0.0,
            decisions: Vec::new(),
            mode: SampleMode::Eval,
            params_version: 0,
        }
    }

    fn query(difficulty: f64) -> QueryRecord {
        QueryRecord {
            id: "q1".into(),
            query: "What is 6 times 7?".into(),
            answer: "42".into(),
            domain: "math".into(),
            difficulty,
        }
    }

    fn env(entries: &[(&str, f64, f64)]) -> SyntheticEnvironment {
        SyntheticEnvironment::new(
            entries
                .iter()
                .map(|&(id, base, cost)| SyntheticOperatorProfile {
                    operator_id: id.into(),
                    base_success: base,
                    difficulty_slope: 0.0,
                    unit_cost: cost,
                    combine_bonus: 0.0,
                    prompt_fix: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn forced_success_direct_io() {
        let reg = Registry::builtin();
        let e = env(&[("io", 1.0, 1.5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = execute(&arch(&[&["io"]]), &reg, &query(0.5), &e, &mut rng).unwrap();
        assert_eq!(t.utility, 1.0);
        assert_eq!(t.cost, 1.5);
        assert_eq!(t.llm_calls, 1);
        assert_eq!(t.final_answer, "42");
    }

    #[test]
    fn forced_failure_everywhere() {
        let reg = Registry::builtin();
        let ids = ["io", "cot", "debate", "sc", "refine", "ensemble", "test", "react"];
        let e = env(&ids.map(|id| (id, 0.0, 1.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in [arch(&[&["io"]]), arch(&[&["cot", "sc"], &["debate"], &["react", "test"]])] {
            let t = execute(&a, &reg, &query(0.0), &e, &mut rng).unwrap();
            assert_eq!(t.utility, 0.0);
        }
    }

    #[test]
    fn cost_is_additive_and_order_respects_dag() {
        let reg = Registry::builtin();
        let e = env(&[("cot", 0.5, 2.0), ("debate", 0.5, 3.0), ("react", 0.5, 4.0)]);
        let a = arch(&[&["cot", "debate"], &["react"]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = execute(&a, &reg, &query(0.0), &e, &mut rng).unwrap();
        assert_eq!(t.cost, 9.0);
        assert_eq!(t.llm_calls, 1 + 3 + 1);
        let edges = build_dag(&a, &reg);
        for edge in &edges {
            if let (Some(from), Some(to)) = (t.output_of(&edge.from), t.output_of(&edge.to)) {
                assert!(from.seq < to.seq);
            }
        }
    }

    #[test]
    fn execution_is_reproducible() {
        let reg = Registry::builtin();
        let e = env(&[("cot", 0.5, 2.0), ("debate", 0.5, 3.0), ("react", 0.5, 4.0)]);
        let a = arch(&[&["cot", "debate"], &["react"], &["cot", "react"]]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            execute(&a, &reg, &query(0.2), &e, &mut rng).unwrap()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn empty_architecture_is_rejected() {
        let reg = Registry::builtin();
        let e = env(&[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            execute(&arch(&[]), &reg, &query(0.0), &e, &mut rng),
            Err(ExecError::EmptyArchitecture)
        );
    }

    fn out(index: usize, output: &str) -> NodeOutput {
        NodeOutput {
            node: NodeRef::Sink,
            operator_index: index,
            output: output.into(),
            correct: false,
            cost: 1.0,
            seq: 0,
        }
    }

    #[test]
    fn vote_majority_and_ties() {
        let a = [out(3, "x"), out(1, "y"), out(2, " x ")];
        assert_eq!(majority_vote(&a.iter().collect::<Vec<_>>()).unwrap(), "x");
        let b = [out(5, "WRONG:a"), out(2, "WRONG:b"), out(4, "42")];
        assert_eq!(majority_vote(&b.iter().collect::<Vec<_>>()).unwrap(), "WRONG:b");
        let c = [out(0, "same"), out(1, "same")];
        assert_eq!(majority_vote(&c.iter().collect::<Vec<_>>()).unwrap(), "same");
        assert_eq!(majority_vote(&[]), None);
    }
}
