//! Textual-gradient mutators that turn a window of executions into operator
//! patches.
//!
//! Mutators only ever propose prompt, temperature and structure changes. Code
//! returned by a model is mined for a prompt string and otherwise discarded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::OptimError;
use crate::executor::live::{ChatClient, ChatMessage};
use crate::executor::{ExecError, ExecutionTrace, QueryRecord};
use crate::registry::{OperatorPatch, Registry, StructureAction, DOUBLE_CHECK_SENTENCE};

/// One execution together with the query it answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedTrace {
    pub query: QueryRecord,
    pub trace: ExecutionTrace,
}

pub trait Mutator: Send + Sync {
    fn propose(
        &self,
        registry: &Registry,
        window: &[ObservedTrace],
    ) -> Result<Vec<OperatorPatch>, OptimError>;
}

/// Runs `mutator` over a non-empty window.
pub fn textual_gradient(
    registry: &Registry,
    window: &[ObservedTrace],
    mutator: &dyn Mutator,
) -> Result<Vec<OperatorPatch>, OptimError> {
    if window.is_empty() {
        return Err(OptimError::NoTraces);
    }
    mutator.propose(registry, window)
}

/// Per-operator `(successes, executions)` over every node in the window,
/// keyed by registry index. Operators that never ran are absent.
pub fn operator_success(registry: &Registry, window: &[ObservedTrace]) -> BTreeMap<usize, (u64, u64)> {
    let mut stats = BTreeMap::new();
    for node in window.iter().flat_map(|w| &w.trace.node_outputs) {
        let crate::sampler::NodeRef::Op { id, .. } = &node.node else {
            continue;
        };
        let Some(index) = registry.index_of(id) else {
            continue;
        };
        let entry = stats.entry(index).or_insert((0u64, 0u64));
        entry.0 += u64::from(node.correct);
        entry.1 += 1;
    }
    stats
}

const TEMPERATURE_TARGET: f64 = 0.5;
const TEMPERATURE_STEP: f64 = 0.1;

fn round_tenth(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// One step of `0.1` toward `0.5`, never overshooting.
pub fn step_temperature(t: f64) -> f64 {
    if (t - TEMPERATURE_TARGET).abs() <= TEMPERATURE_STEP {
        TEMPERATURE_TARGET
    } else if t > TEMPERATURE_TARGET {
        round_tenth(t - TEMPERATURE_STEP)
    } else {
        round_tenth(t + TEMPERATURE_STEP)
    }
}

/// Deterministic mutator: patches the executed operator with the lowest node
/// success rate (ties to the lowest index) by appending a self-check sentence
/// and stepping its temperature toward `0.5`. A no-op patch is suppressed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockMutator;

impl Mutator for MockMutator {
    fn propose(
        &self,
        registry: &Registry,
        window: &[ObservedTrace],
    ) -> Result<Vec<OperatorPatch>, OptimError> {
        let stats = operator_success(registry, window);
        let mut worst: Option<(usize, f64)> = None;
        for (&index, &(ok, n)) in &stats {
            let rate = ok as f64 / n as f64;
            if worst.is_none_or(|(_, r)| rate < r) {
                worst = Some((index, rate));
            }
        }
        let Some((index, rate)) = worst else {
            return Ok(Vec::new());
        };
        let op = &registry.operators()[index];
        let new_prompt = (!op.prompt.contains(DOUBLE_CHECK_SENTENCE))
            .then(|| format!("{}\n{}", op.prompt, DOUBLE_CHECK_SENTENCE));
        let stepped = step_temperature(op.temperature);
        let new_temperature = (stepped != op.temperature).then_some(stepped);
        if new_prompt.is_none() && new_temperature.is_none() {
            return Ok(Vec::new());
        }
        Ok(vec![OperatorPatch {
            target_id: op.id.clone(),
            new_prompt,
            new_temperature,
            structure_action: StructureAction::None,
            rationale: format!("lowest node success rate in window ({rate:.3})"),
        }])
    }
}

const TEMPLATE: &str = r#"# Role
You design agentic systems: reusable operators made of prompts, sampling temperatures and control flow that an orchestrator chains together to solve tasks. Your job is to propose one improvement to an existing operator so that the system answers {DOMAIN} tasks more reliably.

# Example task
{EXAMPLE}

# Operator template
Every operator is a prompt template with an `{input}` slot, a model binding, a temperature and a number of internal model calls:

class Operator:
    PROMPT = '''<instructions for the model>

Problem:
{input}'''
    temperature = 1.0
    agent_count = 1

# Operator archive
{ARCHIVE}

# Recent failures
{FAILURES}

# Reply format
Reply with a single JSON object and nothing else. Keys:
- "thought": your reasoning about why the weakest operator fails and how to fix it.
- "description": a one-sentence summary of the change.
- "code": the revised operator written against the template above.
- "target": the id of the operator to change, copied from the archive.
- "prompt": the complete revised prompt (optional if "code" contains it in a triple-quoted string).
- "temperature": a new temperature between 0 and 2 (optional).
- "structure": one of "none", "split", "rewire" or "merge:<other id>" (optional).
"#;

/// Renders the textual-gradient prompt for `window`.
pub fn render_mutation_prompt(registry: &Registry, window: &[ObservedTrace]) -> String {
    let domain = window
        .first()
        .map(|w| w.query.domain.clone())
        .unwrap_or_else(|| "general".into());
    let example = window
        .first()
        .map(|w| w.query.query.clone())
        .unwrap_or_default();

    let stats = operator_success(registry, window);
    let mut archive = String::new();
    for (i, op) in registry.operators().iter().enumerate() {
        if op.is_exit() {
            continue;
        }
        let record = match stats.get(&i) {
            Some(&(ok, n)) => format!("{ok}/{n} node successes"),
            None => "not executed".into(),
        };
        archive.push_str(&format!(
            "## {} ({})\nid: {}\ntemperature: {}\nagent_count: {}\nrecent record: {}\nprompt:\n{}\n\n",
            op.name, op.profile_text, op.id, op.temperature, op.agent_count, record, op.prompt
        ));
    }

    let mut failures = String::new();
    for w in window.iter().filter(|w| w.trace.utility < 1.0).take(5) {
        let layers: Vec<String> = w.trace.architecture.layers.iter().map(|l| l.join("+")).collect();
        failures.push_str(&format!(
            "- question: {}\n  expected: {}\n  got: {}\n  architecture: {}\n",
            w.query.query,
            w.query.answer,
            w.trace.final_answer,
            layers.join(" -> ")
        ));
    }
    if failures.is_empty() {
        failures.push_str("(none in this window)\n");
    }

    TEMPLATE
        .replace("{DOMAIN}", &domain)
        .replace("{EXAMPLE}", &example)
        .replace("{ARCHIVE}", archive.trim_end())
        .replace("{FAILURES}", failures.trim_end())
}

/// Mutator backed by a chat model.
pub struct LlmMutator {
    client: ChatClient,
    model: String,
    temperature: f64,
}

impl LlmMutator {
    pub fn new(client: ChatClient, model: impl Into<String>) -> Self {
        Self { client, model: model.into(), temperature: 0.7 }
    }
}

impl Mutator for LlmMutator {
    fn propose(
        &self,
        registry: &Registry,
        window: &[ObservedTrace],
    ) -> Result<Vec<OperatorPatch>, OptimError> {
        let prompt = render_mutation_prompt(registry, window);
        let reply = self
            .client
            .complete(&self.model, self.temperature, &[ChatMessage::user(prompt)])
            .map_err(|e| match e {
                ExecError::MalformedResponse(m) => OptimError::UnparseableMutation(m),
                other => OptimError::MutatorUnavailable(other.to_string()),
            })?;
        Ok(vec![parse_mutation(&reply.content)?])
    }
}

fn json_object(text: &str) -> Option<Value> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    serde_json::from_str(text.get(start..=end)?).ok()
}

/// First `'''…'''` or `"""…"""` literal in `code`.
fn triple_quoted(code: &str) -> Option<String> {
    ["'''", "\"\"\""]
        .iter()
        .filter_map(|q| {
            let start = code.find(q)? + q.len();
            let len = code[start..].find(q)?;
            Some((start, code[start..start + len].trim().to_string()))
        })
        .min_by_key(|(start, _)| *start)
        .map(|(_, s)| s)
        .filter(|s| !s.is_empty())
}

fn parse_structure(v: &Value) -> Option<StructureAction> {
    if let Some(s) = v.as_str() {
        let s = s.trim();
        return match s.to_ascii_lowercase().as_str() {
            "" | "none" => Some(StructureAction::None),
            "split" => Some(StructureAction::Split),
            "rewire" => Some(StructureAction::Rewire),
            lower => lower
                .strip_prefix("merge:")
                .map(|_| StructureAction::Merge(s["merge:".len()..].trim().to_string())),
        };
    }
    serde_json::from_value(v.clone()).ok()
}

/// Validates a model reply and reduces it to an [`OperatorPatch`].
pub fn parse_mutation(reply: &str) -> Result<OperatorPatch, OptimError> {
    let bad = |m: &str| OptimError::UnparseableMutation(m.to_string());
    let v = json_object(reply).ok_or_else(|| bad("reply holds no JSON object"))?;
    let field = |k: &str| v.get(k).and_then(Value::as_str);
    let (Some(thought), Some(description), Some(code)) =
        (field("thought"), field("description"), field("code"))
    else {
        return Err(bad("missing thought, description or code"));
    };
    let target = field("target")
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| bad("missing target"))?;
    let new_prompt = field("prompt")
        .map(str::to_string)
        .filter(|p| !p.trim().is_empty())
        .or_else(|| triple_quoted(code));
    let new_temperature = match v.get("temperature") {
        None | Some(Value::Null) => None,
        Some(t) => Some(
            t.as_f64()
                .filter(|t| (0.0..=2.0).contains(t))
                .ok_or_else(|| bad("temperature outside [0, 2]"))?,
        ),
    };
    let structure_action = match v.get("structure") {
        None | Some(Value::Null) => StructureAction::None,
        Some(s) => parse_structure(s).ok_or_else(|| bad("unknown structure action"))?,
    };
    let patch = OperatorPatch {
        target_id: target.trim().to_string(),
        new_prompt,
        new_temperature,
        structure_action,
        rationale: if description.is_empty() { thought.to_string() } else { description.to_string() },
    };
    patch.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::NodeOutput;
    use crate::http::{RetryPolicy, Transport, TransportError};
    use crate::sampler::{Architecture, NodeRef, SampleMode};
    use serde_json::json;
    use std::sync::{Arc, Mutex};
    use std::time::Duration;

    fn node(id: &str, index: usize, correct: bool) -> NodeOutput {
        NodeOutput {
            node: NodeRef::Op { layer: 1, id: id.into() },
            operator_index: index,
            output: if correct { "1".into() } else { format!("WRONG:{id}") },
            correct,
            cost: 1.0,
            seq: 0,
        }
    }

    fn observed(nodes: Vec<NodeOutput>, utility: f64) -> ObservedTrace {
        let layers = vec![nodes
            .iter()
            .map(|n| match &n.node {
                NodeRef::Op { id, .. } => id.clone(),
                _ => unreachable!(),
            })
            .collect()];
        ObservedTrace {
            query: QueryRecord {
                id: "q".into(),
                query: "count the marbles".into(),
                answer: "1".into(),
                domain: "math".into(),
                difficulty: 0.5,
            },
            trace: ExecutionTrace {
                query_id: "q".into(),
                architecture: Architecture {
                    layers,
                    exit_layer: None,
                    edges: Vec::new(),
                    log_prob: 0.0,
                    decisions: Vec::new(),
                    mode: SampleMode::Train,
                    params_version: 0,
                },
                node_outputs: nodes,
                final_answer: "WRONG".into(),
                utility,
                cost: 2.0,
                llm_calls: 2,
            },
        }
    }

    fn cot_react_window() -> Vec<ObservedTrace> {
        vec![
            observed(vec![node("cot", 1, false), node("react", 7, true)], 0.0),
            observed(vec![node("cot", 1, false), node("react", 7, false)], 0.0),
            observed(vec![node("cot", 1, false), node("react", 7, true)], 0.0),
        ]
    }

    #[test]
    fn mock_targets_lowest_success_rate() {
        let reg = Registry::builtin();
        let patches = textual_gradient(&reg, &cot_react_window(), &MockMutator).unwrap();
        assert_eq!(patches.len(), 1);
        let p = &patches[0];
        assert_eq!(p.target_id, "cot");
        assert_eq!(p.new_temperature, Some(0.9));
        assert!(p.new_prompt.as_ref().unwrap().ends_with(&format!("\n{DOUBLE_CHECK_SENTENCE}")));
    }

    #[test]
    fn mock_ties_go_to_lowest_index() {
        let reg = Registry::builtin();
        let window = vec![observed(vec![node("react", 7, false), node("debate", 2, false)], 0.0)];
        let patches = MockMutator.propose(&reg, &window).unwrap();
        assert_eq!(patches[0].target_id, "debate");
    }

    #[test]
    fn temperature_steps() {
        assert_eq!(step_temperature(1.0), 0.9);
        assert_eq!(step_temperature(0.9), 0.8);
        assert_eq!(step_temperature(0.55), 0.5);
        assert_eq!(step_temperature(0.0), 0.1);
        assert_eq!(step_temperature(0.5), 0.5);
        assert_eq!(step_temperature(2.0), 1.9);
        let mut t = 1.0;
        for _ in 0..5 {
            t = step_temperature(t);
        }
        assert_eq!(t, 0.5);
    }

    #[test]
    fn mock_is_idempotent_once_converged() {
        let mut reg = Registry::builtin();
        let window = cot_react_window();
        let mut applied = 0;
        loop {
            let patches = MockMutator.propose(&reg, &window).unwrap();
            if patches.is_empty() {
                break;
            }
            for p in &patches {
                reg.apply_patch(p).unwrap();
            }
            applied += 1;
            assert!(applied < 10);
        }
        let cot = reg.by_id("cot").unwrap();
        assert_eq!(cot.temperature, 0.5);
        assert_eq!(cot.prompt.matches(DOUBLE_CHECK_SENTENCE).count(), 1);
        assert_eq!(applied, 5);
    }

    #[test]
    fn empty_window_is_rejected() {
        assert_eq!(
            textual_gradient(&Registry::builtin(), &[], &MockMutator),
            Err(OptimError::NoTraces)
        );
    }

    struct Fixed(Mutex<Vec<Result<Value, TransportError>>>, Mutex<Vec<Value>>);

    impl Transport for Fixed {
        fn post_json(&self, _: &str, _: Option<&str>, body: &Value) -> Result<Value, TransportError> {
            self.1.lock().unwrap().push(body.clone());
            self.0.lock().unwrap().remove(0)
        }
    }

    fn chat(content: &str) -> Value {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
    }

    fn llm(replies: Vec<Result<Value, TransportError>>) -> (LlmMutator, Arc<Fixed>) {
        let t = Arc::new(Fixed(Mutex::new(replies), Mutex::new(Vec::new())));
        let client = ChatClient::new("http://stub", None, t.clone())
            .with_retry(RetryPolicy { max_attempts: 2, base_delay: Duration::ZERO });
        (LlmMutator::new(client, "gpt-4o-mini"), t)
    }

    #[test]
    fn llm_reply_fields_become_the_patch() {
        let reply = json!({
            "thought": "cot skips verification",
            "description": "add explicit verification",
            "code": "class Cot(Operator):\n    PROMPT = '''Solve carefully and verify.\n{input}'''",
            "target": "cot",
            "temperature": 0.4,
            "structure": "rewire"
        });
        let (m, t) = llm(vec![Ok(chat(&format!("```json\n{reply}\n```")))]);
        let patches = textual_gradient(&Registry::builtin(), &cot_react_window(), &m).unwrap();
        assert_eq!(
            patches,
            vec![OperatorPatch {
                target_id: "cot".into(),
                new_prompt: Some("Solve carefully and verify.\n{input}".into()),
                new_temperature: Some(0.4),
                structure_action: StructureAction::Rewire,
                rationale: "add explicit verification".into(),
            }]
        );
        let sent = &t.1.lock().unwrap()[0];
        let prompt = sent["messages"][0]["content"].as_str().unwrap();
        assert!(prompt.contains("id: cot"));
        assert!(prompt.contains("count the marbles"));
        assert!(prompt.contains("0/3 node successes"));
    }

    #[test]
    fn llm_failures() {
        let (m, _) = llm(vec![Ok(chat("I would rather not."))]);
        assert!(matches!(
            m.propose(&Registry::builtin(), &cot_react_window()),
            Err(OptimError::UnparseableMutation(_))
        ));
        let down = || Err(TransportError::Status { status: 503, body: String::new() });
        let (m, _) = llm(vec![down(), down()]);
        assert!(matches!(
            m.propose(&Registry::builtin(), &cot_react_window()),
            Err(OptimError::MutatorUnavailable(_))
        ));
    }

    #[test]
    fn parser_schema() {
        let base = json!({"thought": "t", "description": "d", "code": "", "target": "sc"});
        let with = |k: &str, v: Value| {
            let mut o = base.clone();
            o[k] = v;
            o.to_string()
        };
        assert!(parse_mutation(&base.to_string()).is_err());
        let p = parse_mutation(&with("structure", json!("merge:ensemble"))).unwrap();
        assert_eq!(p.structure_action, StructureAction::Merge("ensemble".into()));
        let p = parse_mutation(&with("structure", json!({"action": "split"}))).unwrap();
        assert_eq!(p.structure_action, StructureAction::Split);
        assert!(parse_mutation(&with("temperature", json!(3.0))).is_err());
        assert!(parse_mutation(&with("structure", json!("explode"))).is_err());
        let p = parse_mutation(&with("prompt", json!("Vote carefully."))).unwrap();
        assert_eq!(p.new_prompt.as_deref(), Some("Vote carefully."));
        assert!(parse_mutation(r#"{"description": "d", "code": "", "target": "sc", "prompt": "x"}"#).is_err());
    }
}
