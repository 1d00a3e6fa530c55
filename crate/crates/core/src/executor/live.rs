//! OpenAI-compatible chat backend.

use std::sync::Arc;
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::checker::{normalize, Checker};
use super::{Environment, ExecError, NodeOutput, NodeRun, QueryRecord};
use crate::http::{
    endpoint, HttpTransport, InFlightLimit, RetryPolicy, Transport, API_KEY_ENV, BASE_URL_ENV,
};
use crate::registry::OperatorSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl ChatReply {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Blocking chat-completions client with retries and an in-flight cap.
pub struct ChatClient {
    url: String,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

impl ChatClient {
    pub fn new(base_url: &str, api_key: Option<String>, transport: Arc<dyn Transport>) -> Self {
        Self {
            url: endpoint(base_url, "/v1/chat/completions"),
            api_key,
            transport,
            retry: RetryPolicy::default(),
            limit: InFlightLimit::new(4),
        }
    }

    /// Reads `MAAS_BASE_URL` and `MAAS_API_KEY`.
    pub fn from_env() -> Result<Self, ExecError> {
        let unavailable = |reason: String| ExecError::BackendUnavailable { attempts: 0, reason };
        let base = std::env::var(BASE_URL_ENV)
            .map_err(|_| unavailable(format!("{BASE_URL_ENV} is not set")))?;
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| unavailable(format!("{API_KEY_ENV} is not set")))?;
        let transport =
            HttpTransport::new(Duration::from_secs(120)).map_err(|e| unavailable(e.to_string()))?;
        Ok(Self::new(&base, Some(key), Arc::new(transport)))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.limit = InFlightLimit::new(cap);
        self
    }

    pub fn complete(
        &self,
        model: &str,
        temperature: f64,
        messages: &[ChatMessage],
    ) -> Result<ChatReply, ExecError> {
        let body = json!({
            "model": model,
            "temperature": temperature,
            "messages": messages,
        });
        let reply = {
            let _slot = self.limit.acquire();
            self.retry
                .run(|| self.transport.post_json(&self.url, self.api_key.as_deref(), &body))
                .map_err(|(e, attempts)| ExecError::BackendUnavailable {
                    attempts,
                    reason: e.to_string(),
                })?
        };
        parse_chat_reply(&reply)
    }
}

pub fn parse_chat_reply(reply: &Value) -> Result<ChatReply, ExecError> {
    let content = reply["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| ExecError::MalformedResponse("missing choices[0].message.content".into()))?;
    let usage = &reply["usage"];
    Ok(ChatReply {
        content: content.to_string(),
        prompt_tokens: usage["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: usage["completion_tokens"].as_u64().unwrap_or(0),
    })
}

/// One call of `op` on an already rendered prompt. Returns the content and
/// the prompt/completion token counts.
pub fn live_call(
    client: &ChatClient,
    op: &OperatorSpec,
    rendered: &str,
) -> Result<(String, u64, u64), ExecError> {
    let reply = client.complete(&op.model_binding, op.temperature, &[ChatMessage::user(rendered)])?;
    Ok((reply.content, reply.prompt_tokens, reply.completion_tokens))
}

/// Text after the last `Answer:` marker, or the last non-empty line.
pub fn extract_answer(content: &str) -> String {
    let lines: Vec<&str> = content.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    for line in lines.iter().rev() {
        let lower = line.to_ascii_lowercase();
        if let Some(pos) = lower.find("answer:") {
            return line[pos + "answer:".len()..].trim().to_string();
        }
    }
    lines.last().map(|l| l.to_string()).unwrap_or_default()
}

/// Runs operators through a chat model. An operator with `agent_count = m`
/// makes `m` calls and keeps the most common extracted answer.
pub struct LiveEnvironment {
    client: ChatClient,
    checker: Checker,
}

impl LiveEnvironment {
    pub fn new(client: ChatClient, checker: Checker) -> Self {
        Self { client, checker }
    }

    pub fn render(op: &OperatorSpec, query: &QueryRecord, predecessors: &[NodeOutput]) -> String {
        let mut prompt = op.render_prompt(&query.query);
        if !predecessors.is_empty() {
            prompt.push_str("\n\nAnswers proposed by earlier agents:\n");
            for p in predecessors {
                prompt.push_str(&format!("- {}\n", p.output));
            }
        }
        if !op.tools.is_empty() {
            prompt.push_str(&format!("\nAvailable tools: {}\n", op.tools.join(", ")));
        }
        prompt.push_str("\nEnd your reply with a final line of the form `Answer: <answer>`.");
        prompt
    }
}

impl Environment for LiveEnvironment {
    fn run_node(
        &self,
        op: &OperatorSpec,
        query: &QueryRecord,
        predecessors: &[NodeOutput],
        _rng: &mut dyn RngCore,
    ) -> Result<NodeRun, ExecError> {
        let prompt = Self::render(op, query, predecessors);
        let mut answers: Vec<String> = Vec::new();
        let mut tokens = 0u64;
        for _ in 0..op.agent_count {
            let (content, prompt_tokens, completion_tokens) = live_call(&self.client, op, &prompt)?;
            tokens += prompt_tokens + completion_tokens;
            answers.push(extract_answer(&content));
        }
        let mut best = (0usize, String::new());
        for a in &answers {
            let count = answers.iter().filter(|b| normalize(b) == normalize(a)).count();
            if count > best.0 {
                best = (count, a.clone());
            }
        }
        Ok(NodeRun { output: best.1, cost: tokens as f64 })
    }

    fn evaluate(&self, answer: &str, query: &QueryRecord) -> f64 {
        self.checker.evaluate(answer, &query.answer)
    }
}
