//! HTTP clients for a hosted judge and a chat-completion policy.

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::environment::{Policy, PolicyError, PolicyInput};
use crate::rewards::{Judge, JudgeError};
use crate::types::{PageImage, PixelSource, Turn};

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub generated: String,
    pub reference: String,
    pub question: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub correct: bool,
}

/// Judge behind `POST {generated, reference, question}` → `{correct}`.
pub struct RemoteJudge {
    url: String,
    agent: ureq::Agent,
}

impl RemoteJudge {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Judge for RemoteJudge {
    fn score(&self, generated: &str, reference: &str, question: &str) -> Result<bool, JudgeError> {
        let req = JudgeRequest {
            generated: generated.into(),
            reference: reference.into(),
            question: question.into(),
        };
        let body: Value = self
            .agent
            .post(&self.url)
            .send_json(&req)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        serde_json::from_value::<JudgeResponse>(body.clone())
            .map(|r| r.correct)
            .map_err(|_| JudgeError::BadScore(body.to_string()))
    }
}

fn image_part(page: &PageImage) -> Option<Value> {
    let png = match &page.source {
        PixelSource::File { path } => std::fs::read(path).ok()?,
        PixelSource::Memory { png } => crate::types::encode_png(png).ok()?,
        PixelSource::Virtual => return None,
    };
    let data = base64::engine::general_purpose::STANDARD.encode(png);
    Some(json!({
        "type": "image_url",
        "image_url": { "url": format!("data:image/png;base64,{data}") }
    }))
}

/// Chat-completion messages for a history, images embedded as data URLs.
pub fn chat_messages(history: &[Turn]) -> Vec<Value> {
    history
        .iter()
        .map(|t| {
            let mut content = vec![json!({ "type": "text", "text": t.text })];
            content.extend(t.images.iter().filter_map(image_part));
            json!({ "role": t.role.as_str(), "content": content })
        })
        .collect()
}

/// Policy served by any endpoint speaking the chat-completion wire format.
pub struct ChatPolicy {
    url: String,
    model: String,
    agent: ureq::Agent,
}

impl ChatPolicy {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Policy for ChatPolicy {
    fn generate(&self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let body = json!({
            "model": self.model,
            "messages": chat_messages(input.history),
            "temperature": input.params.temperature,
            "seed": input.params.seed,
        });
        let resp: Value = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| PolicyError::Other(format!("unexpected completion body: {resp}")))
    }
}
