//! Agentic operators and the registry that owns them.
//!
//! The registry's insertion order is the canonical operator index: controller
//! output columns, tie-breaks and aggregation all refer to it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentence appended by the deterministic mutator.
pub const DOUBLE_CHECK_SENTENCE: &str = "Double-check each intermediate step before answering.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("operator id `{0}` is already registered")]
    DuplicateId(String),
    #[error("temperature {0} is outside [0, 2]")]
    InvalidTemperature(f64),
    #[error("registry already holds an early-exit operator")]
    SecondEarlyExit,
    #[error("registry already holds a direct-io operator")]
    SecondDirectIo,
    #[error("invalid operator `{id}`: {reason}")]
    InvalidSpec { id: String, reason: String },
    #[error("patch targets unknown operator `{0}`")]
    UnknownTarget(String),
    #[error("the early-exit operator cannot be patched")]
    PatchOnExitOperator,
    #[error("merge partner `{0}` is unknown or cannot be absorbed")]
    MergeUnknownPartner(String),
    #[error("patch for `{0}` carries no change")]
    EmptyPatch(String),
    #[error("registry is incomplete: {0}")]
    Incomplete(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Generative,
    Aggregator,
    EarlyExit,
    DirectIo,
}

/// One agentic operator: a prompt run by `agent_count` calls to a bound model,
/// optionally with tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub id: String,
    pub name: String,
    pub prompt: String,
    pub model_binding: String,
    pub temperature: f64,
    pub tools: Vec<String>,
    pub agent_count: u32,
    pub profile_text: String,
    pub kind: OperatorKind,
    /// Set by a `rewire` patch; the DAG builder adds source skip edges.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rewire: bool,
}

impl OperatorSpec {
    pub fn validate(&self) -> Result<(), RegistryError> {
        let invalid = |reason: &str| RegistryError::InvalidSpec {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(RegistryError::InvalidTemperature(self.temperature));
        }
        if self.agent_count == 0 {
            return Err(invalid("agent_count must be at least 1"));
        }
        for (i, tool) in self.tools.iter().enumerate() {
            if self.tools[..i].contains(tool) {
                return Err(invalid("duplicate tool"));
            }
        }
        if self.kind != OperatorKind::EarlyExit && self.profile_text.trim().is_empty() {
            return Err(invalid("profile_text is empty"));
        }
        Ok(())
    }

    pub fn is_exit(&self) -> bool {
        self.kind == OperatorKind::EarlyExit
    }

    /// Fills the `{input}` placeholder, or appends the input when absent.
    pub fn render_prompt(&self, input: &str) -> String {
        if self.prompt.contains("{input}") {
            self.prompt.replace("{input}", input)
        } else if self.prompt.is_empty() {
            input.to_string()
        } else {
            format!("{}\n\n{}", self.prompt, input)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "with")]
pub enum StructureAction {
    None,
    Split,
    Merge(String),
    Rewire,
}

/// A textual-gradient update for one operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorPatch {
    pub target_id: String,
    #[serde(default)]
    pub new_prompt: Option<String>,
    #[serde(default)]
    pub new_temperature: Option<f64>,
    pub structure_action: StructureAction,
    #[serde(default)]
    pub rationale: String,
}

impl OperatorPatch {
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.new_prompt.is_none()
            && self.new_temperature.is_none()
            && self.structure_action == StructureAction::None
        {
            return Err(RegistryError::EmptyPatch(self.target_id.clone()));
        }
        if let Some(t) = self.new_temperature {
            if !t.is_finite() || !(0.0..=2.0).contains(&t) {
                return Err(RegistryError::InvalidTemperature(t));
            }
        }
        Ok(())
    }
}

/// How a patch changed operator indices. The controller uses this to remap
/// its output columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexChange {
    Unchanged,
    /// A clone of `parent` was appended at `index`.
    Appended { parent: usize, index: usize },
    /// The operator at `index` was removed; later indices shift down by one.
    Removed { index: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<OperatorSpec>", into = "Vec<OperatorSpec>")]
pub struct Registry {
    operators: Vec<OperatorSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The shipped catalog, already validated.
    pub fn builtin() -> Self {
        let mut registry = Self::new();
        for spec in builtin_catalog() {
            registry.register(spec).expect("builtin catalog is valid");
        }
        registry
    }

    /// Builds a registry from specs in order, enforcing every invariant.
    pub fn from_specs(specs: Vec<OperatorSpec>) -> Result<Self, RegistryError> {
        let mut registry = Self::new();
        for spec in specs {
            registry.register(spec)?;
        }
        Ok(registry)
    }

    pub fn register(&mut self, spec: OperatorSpec) -> Result<(), RegistryError> {
        if self.index_of(&spec.id).is_some() {
            return Err(RegistryError::DuplicateId(spec.id));
        }
        spec.validate()?;
        match spec.kind {
            OperatorKind::EarlyExit if self.exit_index().is_some() => {
                return Err(RegistryError::SecondEarlyExit)
            }
            OperatorKind::DirectIo if self.direct_io_index().is_some() => {
                return Err(RegistryError::SecondDirectIo)
            }
            _ => {}
        }
        self.operators.push(spec);
        Ok(())
    }

    /// Checks that the registry can drive sampling: one exit and one direct-io.
    pub fn validate_complete(&self) -> Result<(), RegistryError> {
        if self.exit_index().is_none() {
            return Err(RegistryError::Incomplete("no early-exit operator"));
        }
        if self.direct_io_index().is_none() {
            return Err(RegistryError::Incomplete("no direct-io operator"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[OperatorSpec] {
        &self.operators
    }

    pub fn get(&self, index: usize) -> Option<&OperatorSpec> {
        self.operators.get(index)
    }

    pub fn by_id(&self, id: &str) -> Option<&OperatorSpec> {
        self.index_of(id).map(|i| &self.operators[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.operators.iter().position(|op| op.id == id)
    }

    pub fn exit_index(&self) -> Option<usize> {
        self.operators.iter().position(|op| op.kind == OperatorKind::EarlyExit)
    }

    pub fn direct_io_index(&self) -> Option<usize> {
        self.operators.iter().position(|op| op.kind == OperatorKind::DirectIo)
    }

    /// Applies one patch. This is the only mutation path after registration.
    pub fn apply_patch(&mut self, patch: &OperatorPatch) -> Result<IndexChange, RegistryError> {
        patch.validate()?;
        let target = self
            .index_of(&patch.target_id)
            .ok_or_else(|| RegistryError::UnknownTarget(patch.target_id.clone()))?;
        if self.operators[target].is_exit() {
            return Err(RegistryError::PatchOnExitOperator);
        }

        // Resolve the merge partner before touching anything so a failed
        // patch leaves the registry unchanged.
        let partner = match &patch.structure_action {
            StructureAction::Merge(with_id) => {
                let idx = self
                    .index_of(with_id)
                    .filter(|&i| i != target)
                    .filter(|&i| {
                        !matches!(
                            self.operators[i].kind,
                            OperatorKind::EarlyExit | OperatorKind::DirectIo
                        )
                    })
                    .ok_or_else(|| RegistryError::MergeUnknownPartner(with_id.clone()))?;
                Some(idx)
            }
            _ => None,
        };

        let op = &mut self.operators[target];
        if let Some(prompt) = &patch.new_prompt {
            op.prompt = prompt.clone();
        }
        if let Some(t) = patch.new_temperature {
            op.temperature = t;
        }

        match &patch.structure_action {
            StructureAction::None => Ok(IndexChange::Unchanged),
            StructureAction::Rewire => {
                op.rewire = true;
                Ok(IndexChange::Unchanged)
            }
            StructureAction::Split => {
                let mut clone = op.clone();
                let mut id = format!("{}-b", clone.id);
                while self.index_of(&id).is_some() {
                    id.push_str("-b");
                }
                clone.name = format!("{} (split)", clone.name);
                clone.id = id;
                if clone.kind == OperatorKind::DirectIo {
                    clone.kind = OperatorKind::Generative;
                }
                self.operators.push(clone);
                Ok(IndexChange::Appended {
                    parent: target,
                    index: self.operators.len() - 1,
                })
            }
            StructureAction::Merge(_) => {
                let partner = partner.expect("resolved above");
                let absorbed = self.operators.remove(partner);
                let target = if partner < target { target - 1 } else { target };
                let op = &mut self.operators[target];
                op.prompt = format!("{}\n{}", op.prompt, absorbed.prompt);
                Ok(IndexChange::Removed { index: partner })
            }
        }
    }
}

impl TryFrom<Vec<OperatorSpec>> for Registry {
    type Error = RegistryError;

    fn try_from(specs: Vec<OperatorSpec>) -> Result<Self, Self::Error> {
        Self::from_specs(specs)
    }
}

impl From<Registry> for Vec<OperatorSpec> {
    fn from(registry: Registry) -> Self {
        registry.operators
    }
}

fn spec(
    id: &str,
    name: &str,
    kind: OperatorKind,
    agent_count: u32,
    tools: &[&str],
    prompt: &str,
    profile: &str,
) -> OperatorSpec {
    OperatorSpec {
        id: id.to_string(),
        name: name.to_string(),
        prompt: prompt.to_string(),
        model_binding: "gpt-4o-mini".to_string(),
        temperature: 1.0,
        tools: tools.iter().map(|t| t.to_string()).collect(),
        agent_count,
        profile_text: profile.to_string(),
        kind,
        rewire: false,
    }
}

/// The built-in operator catalog in canonical index order.
pub fn builtin_catalog() -> Vec<OperatorSpec> {
    use OperatorKind::*;
    vec![
        spec(
            "cot",
            "Chain-of-Thought",
            Generative,
            1,
            &[],
            "Solve the following problem. Think step by step, writing out each \
             intermediate result before giving the final answer.\n\n{input}",
            "Chain-of-thought reasoning operator. One agent works through the problem \
             step by step, writing intermediate reasoning before committing to an \
             answer, which helps on multi-step arithmetic and logic.",
        ),
        spec(
            "debate",
            "LLM-Debate",
            Generative,
            3,
            &[],
            "You are one of several debaters. Propose a solution to the problem below, \
             then critique the other debaters' solutions and revise yours over at most \
             two rounds.\n\n{input}",
            "Multi-agent debate operator. Three debaters propose answers and argue over \
             up to two rounds, using disagreement to expose mistakes before settling on \
             a shared answer.",
        ),
        spec(
            "sc",
            "Self-Consistency",
            Aggregator,
            5,
            &[],
            "Solve the following problem step by step. Give your final answer on the \
             last line.\n\n{input}",
            "Self-consistency operator. Samples five independent chain-of-thought \
             solutions and returns the answer chosen by majority vote, trading extra \
             calls for robustness against unlucky reasoning paths.",
        ),
        spec(
            "refine",
            "Self-Refine",
            Generative,
            2,
            &[],
            "Draft an answer to the problem below, then review your draft for errors \
             and rewrite it. Repeat the review at most five times.\n\n{input}",
            "Self-refinement operator. Produces a first answer with step-by-step \
             reasoning, then critiques and rewrites its own answer iteratively until \
             no further corrections are found.",
        ),
        spec(
            "ensemble",
            "Ensemble",
            Aggregator,
            3,
            &[],
            "Several independent assistants answered the problem below. Rank their \
             answers pairwise and return the best one.\n\n{input}",
            "Ensemble operator. Three agents backed by different sources answer the \
             same query and their responses are ranked pairwise and fused into a \
             single final solution.",
        ),
        spec(
            "test",
            "Testing",
            Generative,
            1,
            &[],
            "Write test cases that check a candidate solution to the problem below, \
             run them mentally against the candidate, and report a corrected \
             solution.\n\n{input}",
            "Test-design operator. Generates test cases for a candidate program or \
             answer and uses their outcomes to detect and correct faulty solutions, \
             mainly for code generation.",
        ),
        spec(
            "react",
            "ReAct",
            Generative,
            1,
            &["code_interpreter", "web_search", "knowledge_base"],
            "Solve the problem below by interleaving reasoning with tool use. For each \
             step write a thought, then an action with one of the available tools, \
             then the observation.\n\n{input}",
            "Reason-and-act operator. An agent alternates between reasoning and calls \
             to external tools such as a code interpreter, web search or a knowledge \
             base, suiting queries that need facts or computation.",
        ),
        spec("exit", "Early Exit", EarlyExit, 1, &[], "", ""),
        spec(
            "io",
            "Direct IO",
            DirectIo,
            1,
            &[],
            "Answer the following question directly and concisely.\n\n{input}",
            "Direct input-output operator. A single model call answers the question \
             zero-shot with no intermediate reasoning, which makes it the cheapest way \
             to respond to simple, well-posed queries.",
        ),
    ]
}
