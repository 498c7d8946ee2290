//! Optional HTTP client that asks a language model to rewrite a caption.
//!
//! The request body is `{"template_id": ..., "caption": ...}` and the reply
//! must be `{"caption": ...}`. The offline editor in `maskedit-core` is the
//! default; this client is only used when an endpoint is configured.

use std::time::Duration;

use maskedit_core::captions::AttributeKind;
use serde::{Deserialize, Serialize};

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "MASKEDIT_LLM_TOKEN";

/// Instruction templates, versioned as data files.
pub const TEMPLATES: &[(&str, &str)] = &[
    ("local_color", include_str!("../templates/v1/local_color.txt")),
    ("local_material", include_str!("../templates/v1/local_material.txt")),
    ("local_pattern", include_str!("../templates/v1/local_pattern.txt")),
    ("global_domain", include_str!("../templates/v1/global_domain.txt")),
    ("global_weather", include_str!("../templates/v1/global_weather.txt")),
];

pub fn template(id: &str) -> Option<&'static str> {
    TEMPLATES.iter().find(|(k, _)| *k == id).map(|(_, v)| *v)
}

pub fn template_id(kind: AttributeKind) -> &'static str {
    match kind {
        AttributeKind::Color => "local_color",
        AttributeKind::Material => "local_material",
        AttributeKind::Pattern => "local_pattern",
        AttributeKind::Style => "global_domain",
        AttributeKind::Weather => "global_weather",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    /// Connection failures carry no status; HTTP failures carry the code.
    #[error("LLM transport error{}: {detail}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, detail: String },
    #[error("LLM reply does not match the expected schema: {0}")]
    Schema(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
}

#[derive(Serialize)]
struct Request<'a> {
    template_id: &'a str,
    caption: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    caption: String,
}

#[derive(Debug, Clone)]
pub struct LlmClient {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl LlmClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
        }
    }

    /// Client whose token comes from [`TOKEN_ENV`].
    pub fn from_env(endpoint: impl Into<String>) -> Self {
        Self::new(endpoint, std::env::var(TOKEN_ENV).ok())
    }

    pub fn edit(&self, template_id: &str, caption: &str) -> Result<String, LlmError> {
        if template(template_id).is_none() {
            return Err(LlmError::UnknownTemplate(template_id.into()));
        }
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let resp = match req.send_json(Request { template_id, caption }) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                return Err(LlmError::Transport {
                    status: Some(status),
                    detail: r.into_string().unwrap_or_default(),
                })
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(LlmError::Transport {
                    status: None,
                    detail: t.to_string(),
                })
            }
        };
        let body = resp.into_string().map_err(|e| LlmError::Transport {
            status: None,
            detail: e.to_string(),
        })?;
        let reply: Reply = serde_json::from_str(&body).map_err(|e| LlmError::Schema(e.to_string()))?;
        let text = reply.caption.trim();
        if text.is_empty() {
            return Err(LlmError::Schema("empty caption".into()));
        }
        Ok(text.to_string())
    }
}
