//! Desk-scale stand-in for LLM execution.
//!
//! Every operator succeeds with probability
//! `clamp(base − slope·difficulty + bonus·[a predecessor was correct], 0, 1)`
//! and costs a fixed number of units per invocation. A correct node outputs
//! the oracle answer, a failing one outputs `WRONG:<id>`.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::checker::Checker;
use super::{Environment, ExecError, NodeOutput, NodeRun, QueryRecord};
use crate::registry::OperatorSpec;

/// Replaces `base_success` when the operator's prompt contains `marker`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFix {
    pub marker: String,
    pub base_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOperatorProfile {
    pub operator_id: String,
    pub base_success: f64,
    pub difficulty_slope: f64,
    pub unit_cost: f64,
    #[serde(default)]
    pub combine_bonus: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_fix: Option<PromptFix>,
}

impl SyntheticOperatorProfile {
    fn validate(&self) -> Result<(), ExecError> {
        let bad = |what: &str| ExecError::InvalidProfile(format!("{}: {what}", self.operator_id));
        if !(0.0..=1.0).contains(&self.base_success) {
            return Err(bad("base_success outside [0, 1]"));
        }
        if !self.difficulty_slope.is_finite() {
            return Err(bad("difficulty_slope is not finite"));
        }
        if !(self.unit_cost > 0.0 && self.unit_cost.is_finite()) {
            return Err(bad("unit_cost must be positive"));
        }
        if !(0.0..=1.0).contains(&self.combine_bonus) {
            return Err(bad("combine_bonus outside [0, 1]"));
        }
        if let Some(fix) = &self.prompt_fix {
            if !(0.0..=1.0).contains(&fix.base_success) || fix.marker.is_empty() {
                return Err(bad("invalid prompt_fix"));
            }
        }
        Ok(())
    }

    /// Success probability for one invocation.
    pub fn success_probability(
        &self,
        prompt: &str,
        difficulty: f64,
        predecessor_correct: bool,
    ) -> f64 {
        let base = match &self.prompt_fix {
            Some(fix) if prompt.contains(&fix.marker) => fix.base_success,
            _ => self.base_success,
        };
        let bonus = if predecessor_correct { self.combine_bonus } else { 0.0 };
        (base - self.difficulty_slope * difficulty + bonus).clamp(0.0, 1.0)
    }
}

/// Draws one synthetic node outcome. Consumes exactly one uniform draw.
pub fn synthetic_evaluate(
    profile: &SyntheticOperatorProfile,
    op: &OperatorSpec,
    query: &QueryRecord,
    predecessors: &[NodeOutput],
    rng: &mut dyn RngCore,
) -> (String, f64) {
    let p = profile.success_probability(
        &op.prompt,
        query.difficulty,
        predecessors.iter().any(|n| n.correct),
    );
    let output = if rng.gen::<f64>() < p {
        query.answer.clone()
    } else {
        format!("WRONG:{}", op.id)
    };
    (output, profile.unit_cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnvironment {
    profiles: HashMap<String, SyntheticOperatorProfile>,
}

impl SyntheticEnvironment {
    pub fn new(profiles: Vec<SyntheticOperatorProfile>) -> Result<Self, ExecError> {
        let mut map = HashMap::new();
        for p in profiles {
            p.validate()?;
            let id = p.operator_id.clone();
            if map.insert(id.clone(), p).is_some() {
                return Err(ExecError::InvalidProfile(format!("duplicate profile for `{id}`")));
            }
        }
        Ok(Self { profiles: map })
    }

    pub fn from_json(text: &str) -> Result<Self, ExecError> {
        let profiles: Vec<SyntheticOperatorProfile> =
            serde_json::from_str(text).map_err(|e| ExecError::InvalidProfile(e.to_string()))?;
        Self::new(profiles)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExecError::InvalidProfile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Split clones (`cot-b`, `cot-b-b`) inherit their parent's profile.
    pub fn profile(&self, operator_id: &str) -> Option<&SyntheticOperatorProfile> {
        let mut id = operator_id;
        loop {
            if let Some(p) = self.profiles.get(id) {
                return Some(p);
            }
            id = id.strip_suffix("-b")?;
        }
    }
}

impl Environment for SyntheticEnvironment {
    fn run_node(
        &self,
        op: &OperatorSpec,
        query: &QueryRecord,
        predecessors: &[NodeOutput],
        rng: &mut dyn RngCore,
    ) -> Result<NodeRun, ExecError> {
        let profile = self
            .profile(&op.id)
            .ok_or_else(|| ExecError::MissingProfile(op.id.clone()))?;
        let (output, cost) = synthetic_evaluate(profile, op, query, predecessors, rng);
        Ok(NodeRun { output, cost })
    }

    fn evaluate(&self, answer: &str, query: &QueryRecord) -> f64 {
        Checker::ExactMatch.evaluate(answer, &query.answer)
    }
}
