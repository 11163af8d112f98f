use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    BackendError, BackendKind, BackendResponse, CompletionBackend, CompletionRequest, EngineRun,
    API_KEY_ENV,
};
use crate::error::Error;
use crate::prompting::RenderedPrompt;

/// Client for endpoints speaking the common completion convention:
/// `POST {model, prompt, temperature, n, stop, max_tokens}` answered by
/// `{choices: [{text}], usage?}`.
pub struct RemoteBackend {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<serde_json::Value>,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            url: url.into(),
            api_key: api_key.into(),
        }
    }

    pub fn from_env(run: &EngineRun) -> crate::Result<Self> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(Error::MissingCredential(API_KEY_ENV))?;
        let url = run
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Config("remote backend requires endpoint_url".into()))?;
        Ok(Self::new(
            url,
            api_key,
            Duration::from_secs(run.request_timeout_secs),
        ))
    }

    pub fn request_body(request: &CompletionRequest) -> serde_json::Value {
        json!({
            "model": request.engine_name,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "n": request.samples_per_call,
            "stop": request.stop_sequence,
            "max_tokens": request.max_length,
        })
    }
}

fn is_transient_status(status: u16) -> bool {
    status == 408 || status == 409 || status == 429 || status >= 500
}

impl CompletionBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn complete(
        &self,
        request: &CompletionRequest,
        _prompt: &RenderedPrompt,
    ) -> Result<BackendResponse, BackendError> {
        let response = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(Self::request_body(request));
        let mut response = match response {
            Ok(r) => r,
            Err(e) => return Err(BackendError::Transient(e.to_string())),
        };
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if is_transient_status(status) {
            return Err(BackendError::Transient(format!("status {status}: {body}")));
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Fatal(Error::Endpoint {
                status: Some(status),
                message: body,
            }));
        }
        let parsed: CompletionResponse = serde_json::from_str(&body).map_err(|e| {
            BackendError::Fatal(Error::Endpoint {
                status: Some(status),
                message: format!("malformed completion response: {e}"),
            })
        })?;
        let mut choices = parsed.choices;
        choices.sort_by_key(|c| c.index.unwrap_or(usize::MAX));
        Ok(BackendResponse {
            completions: choices.into_iter().map(|c| c.text).collect(),
            cost_meta: parsed.usage,
        })
    }
}
