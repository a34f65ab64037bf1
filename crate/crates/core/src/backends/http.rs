use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, BackendKind, Completion, CompletionRequest, Role};

/// Client for chat-completions endpoints (`POST`, bearer token, a
/// `messages` array whose last user turn carries the images as base64 data
/// URLs).
pub struct HttpChatBackend {
    id: String,
    endpoint: String,
    model: String,
    credential_env: Option<String>,
    timeout_s: f64,
    max_tokens: u32,
    temperature: f64,
    min_interval: Duration,
    client: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
}

impl HttpChatBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let BackendKind::HttpChat {
            endpoint,
            model,
            credential_env,
            timeout_s,
            max_tokens,
            temperature,
            min_interval_s,
        } = &cfg.kind
        else {
            return Err(BackendError::Config(format!("backend {} is not http_chat", cfg.id)));
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(*timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpChatBackend {
            id: cfg.id.clone(),
            endpoint: endpoint.clone(),
            model: model.clone(),
            credential_env: credential_env.clone(),
            timeout_s: *timeout_s,
            max_tokens: *max_tokens,
            temperature: *temperature,
            min_interval: Duration::from_secs_f64(min_interval_s.max(0.0)),
            client,
            last_request: Mutex::new(None),
        })
    }

    /// The JSON body sent for `req`.
    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        let last_user = req.messages.iter().rposition(|m| m.role == Role::User);
        let messages: Vec<Value> = req
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if Some(i) == last_user && !req.images.is_empty() {
                    let mut parts = vec![json!({"type": "text", "text": m.content})];
                    for img in &req.images {
                        let b64 = base64::engine::general_purpose::STANDARD.encode(img.bytes.as_slice());
                        parts.push(json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{b64}", img.media_type)},
                        }));
                    }
                    json!({"role": m.role, "content": parts})
                } else {
                    json!({"role": m.role, "content": m.content})
                }
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().expect("rate limit lock");
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < self.min_interval {
                std::thread::sleep(self.min_interval - since);
            }
        }
        *last = Some(Instant::now());
    }

    fn transport(&self, message: impl Into<String>) -> BackendError {
        BackendError::Transport {
            backend_id: self.id.clone(),
            message: message.into(),
        }
    }
}

impl Backend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn is_live(&self) -> bool {
        true
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let token = match &self.credential_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential {
                backend_id: self.id.clone(),
                var: var.clone(),
            })?),
            None => None,
        };
        let body = self.request_body(req);
        self.throttle();
        let started = Instant::now();
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(t) = token {
            builder = builder.bearer_auth(t);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout {
                    backend_id: self.id.clone(),
                    timeout_s: self.timeout_s,
                }
            } else {
                self.transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                backend_id: self.id.clone(),
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| self.transport(format!("bad JSON: {e}")))?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| self.transport("response has no choices[0].message.content"))?;
        Ok(Completion {
            text: content.to_string(),
            latency_s: started.elapsed().as_secs_f64(),
            prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
            completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64),
        })
    }
}
