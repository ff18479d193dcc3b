//! Optional naturalness scoring through a chat-completion endpoint.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};

/// Instructions sent ahead of every response being scored.
pub const JUDGE_PROMPT: &str = include_str!("../../data/judge_prompt.txt");

pub const ENV_API_BASE: &str = "JUDGE_API_BASE";
pub const ENV_API_KEY: &str = "JUDGE_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeConfig {
    /// Base URL; requests go to `{base}/chat/completions`.
    pub base: String,
    pub api_key: String,
    pub model: String,
    /// Pause between requests.
    pub delay: Duration,
    pub timeout: Duration,
}

impl JudgeConfig {
    /// Resolves the endpoint from `endpoint` or `JUDGE_API_BASE` and the key
    /// from `JUDGE_API_KEY`. `None` means no endpoint is configured at all.
    pub fn from_env(endpoint: Option<&str>, model: &str, delay: Duration) -> Result<Option<Self>> {
        let base = match endpoint
            .map(str::to_string)
            .or_else(|| std::env::var(ENV_API_BASE).ok())
        {
            Some(b) if !b.trim().is_empty() => b,
            _ => return Ok(None),
        };
        let api_key = std::env::var(ENV_API_KEY)
            .map_err(|_| Error::JudgeUnavailable(format!("{ENV_API_KEY} is not set")))?;
        Ok(Some(Self {
            base,
            api_key,
            model: model.to_string(),
            delay,
            timeout: Duration::from_secs(60),
        }))
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.base.trim_end_matches('/'))
    }
}

/// Extracts `X` from a reply containing `Score: X/100`.
///
/// Markdown emphasis around the label is tolerated. Scores outside 0..=100
/// are rejected.
pub fn parse_score(reply: &str) -> Option<f64> {
    let at = reply.find("Score:")?;
    let rest = reply[at + "Score:".len()..].trim_start_matches(|c: char| c == '*' || c.is_whitespace());
    let (num, tail) = rest.split_once('/')?;
    if !tail.trim_start().starts_with("100") {
        return None;
    }
    let v: f64 = num.trim().trim_end_matches('*').trim().parse().ok()?;
    (0.0..=100.0).contains(&v).then_some(v)
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

fn ask(agent: &ureq::Agent, config: &JudgeConfig, text: &str) -> Result<String> {
    let body = json!({
        "model": config.model,
        "temperature": 0,
        "messages": [
            {"role": "user", "content": format!("{JUDGE_PROMPT}\nText: {text}")}
        ],
    });
    let mut resp = agent
        .post(config.url())
        .header("Authorization", format!("Bearer {}", config.api_key))
        .send_json(&body)
        .map_err(|e| Error::JudgeUnavailable(e.to_string()))?;
    let parsed: Completion = resp
        .body_mut()
        .read_json()
        .map_err(|e| Error::JudgeUnavailable(format!("malformed completion: {e}")))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| Error::JudgeUnavailable("completion has no choices".into()))
}

/// Mean judge score over `responses`.
///
/// A reply without a parseable score is retried once and then skipped.
/// Any transport or HTTP failure aborts with `JudgeUnavailable`, as does a
/// run where every response was skipped.
pub fn judge_naturalness(config: &JudgeConfig, responses: &[String]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::Input("no responses to judge".into()));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .build()
        .into();
    let mut scores = Vec::with_capacity(responses.len());
    for (i, text) in responses.iter().enumerate() {
        let mut score = None;
        for attempt in 0..2 {
            if i + attempt > 0 && !config.delay.is_zero() {
                std::thread::sleep(config.delay);
            }
            let reply = ask(&agent, config, text)?;
            score = parse_score(&reply);
            if score.is_some() {
                break;
            }
            log::debug!("unparseable judge reply (attempt {}): {reply:?}", attempt + 1);
        }
        match score {
            Some(s) => scores.push(s),
            None => log::warn!("skipping response {i}: judge gave no score"),
        }
    }
    if scores.is_empty() {
        return Err(Error::JudgeUnavailable("no reply contained a score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
