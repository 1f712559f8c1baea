use std::io::{BufRead, BufReader, ErrorKind};

use serde_json::{json, Value as Json};

use super::{ChatBackend, ChatMessage, LlmError, LlmParams};

const BODY_EXCERPT: usize = 512;

/// OpenAI-compatible `POST {base_url}/chat/completions` client.
///
/// No transport retries happen here; a failed call is reported to the
/// caller, which decides whether it counts against a retry budget.
pub struct HttpLlm {
    params: LlmParams,
    agent: ureq::Agent,
}

impl HttpLlm {
    pub fn new(params: LlmParams) -> Result<Self, LlmError> {
        params.validate()?;
        let agent = ureq::AgentBuilder::new().timeout(params.timeout()).build();
        Ok(Self { params, agent })
    }

    pub fn params(&self) -> &LlmParams {
        &self.params
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.params.base_url.trim_end_matches('/'))
    }

    /// The exact request body: `model`, `messages`, `temperature`, `stream`.
    pub fn request_body(params: &LlmParams, messages: &[ChatMessage], stream: bool) -> Json {
        json!({
            "model": params.model,
            "messages": messages,
            "temperature": params.temperature,
            "stream": stream,
        })
    }

    fn send(&self, messages: &[ChatMessage], stream: bool) -> Result<ureq::Response, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        let mut req = self.agent.post(&self.endpoint());
        if !self.params.api_key.is_empty() {
            req = req.set("Authorization", &format!("Bearer {}", self.params.api_key));
        }
        if stream {
            req = req.set("Accept", "text/event-stream");
        }
        req.send_json(Self::request_body(&self.params, messages, stream)).map_err(map_ureq_error)
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(BODY_EXCERPT).collect()
}

fn map_ureq_error(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Status(status, resp) => {
            let body = resp.into_string().unwrap_or_default();
            LlmError::Http { status, body: excerpt(&body) }
        }
        ureq::Error::Transport(t) => {
            let text = t.to_string();
            if is_timeout_text(&text) {
                LlmError::Timeout
            } else {
                LlmError::Unreachable(text)
            }
        }
    }
}

fn is_timeout_text(s: &str) -> bool {
    let s = s.to_ascii_lowercase();
    s.contains("timed out") || s.contains("timeout")
}

fn delta_content(v: &Json) -> Option<&str> {
    let choice = v.get("choices")?.get(0)?;
    choice.get("delta").and_then(|d| d.get("content")).or_else(|| choice.get("text")).and_then(Json::as_str)
}

impl ChatBackend for HttpLlm {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let resp = self.send(messages, false)?;
        let body = resp.into_string().map_err(|e| {
            if e.kind() == ErrorKind::TimedOut || e.kind() == ErrorKind::WouldBlock {
                LlmError::Timeout
            } else {
                LlmError::Unreachable(e.to_string())
            }
        })?;
        let v: Json = serde_json::from_str(&body)
            .map_err(|e| LlmError::Protocol(format!("invalid JSON ({e}): {}", excerpt(&body))))?;
        let message = v
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .ok_or_else(|| LlmError::Protocol(format!("no choices[0].message in {}", excerpt(&body))))?;
        Ok(message.get("content").and_then(Json::as_str).unwrap_or_default().to_string())
    }

    fn chat_stream(&self, messages: &[ChatMessage], on_chunk: &mut dyn FnMut(&str)) -> Result<String, LlmError> {
        let resp = self.send(messages, true)?;
        let mut reader = BufReader::new(resp.into_reader());
        let mut full = String::new();
        let mut line = String::new();
        loop {
            line.clear();
            match reader.read_line(&mut line) {
                Ok(0) => {
                    return Err(LlmError::Interrupted {
                        partial: full,
                        source_msg: "stream closed before [DONE]".into(),
                    })
                }
                Ok(_) => {}
                Err(e) if full.is_empty() && matches!(e.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock) => {
                    return Err(LlmError::Timeout)
                }
                Err(e) => return Err(LlmError::Interrupted { partial: full, source_msg: e.to_string() }),
            }
            let Some(data) = line.trim_end_matches(['\r', '\n']).strip_prefix("data:") else {
                continue;
            };
            let data = data.trim_start();
            if data == "[DONE]" {
                return Ok(full);
            }
            let v: Json = serde_json::from_str(data).map_err(|e| LlmError::Interrupted {
                partial: full.clone(),
                source_msg: format!("malformed stream frame ({e})"),
            })?;
            if let Some(err) = v.get("error") {
                return Err(LlmError::Interrupted { partial: full, source_msg: err.to_string() });
            }
            if let Some(chunk) = delta_content(&v) {
                if !chunk.is_empty() {
                    on_chunk(chunk);
                    full.push_str(chunk);
                }
            }
        }
    }
}
