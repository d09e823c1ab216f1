use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{DefinitionCache, DefinitionSource, GenerationConfig, ReferentError, TypeDefinition};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for TransportError {}

/// Anything that turns a prompt into a completion.
pub trait CompletionTransport: Send + Sync {
    fn complete(&self, prompt: &str, generation: &GenerationConfig) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub generation: GenerationConfig,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    /// 0 disables the limiter.
    pub requests_per_minute: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/completions".to_string(),
            generation: GenerationConfig::default(),
            max_attempts: 4,
            initial_backoff_ms: 500,
            requests_per_minute: 20,
        }
    }
}

/// Rate-limited, retrying completion client. Without a transport it is
/// offline and every request is refused.
pub struct LlmClient {
    config: ClientConfig,
    transport: Option<Box<dyn CompletionTransport>>,
    last_request: Mutex<Option<Instant>>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("config", &self.config)
            .field("live", &self.is_live())
            .field("requests", &self.requests())
            .finish()
    }
}

impl LlmClient {
    pub fn offline() -> Self {
        Self::new(ClientConfig::default(), None)
    }

    pub fn new(config: ClientConfig, transport: Option<Box<dyn CompletionTransport>>) -> Self {
        Self { config, transport, last_request: Mutex::new(None), requests: AtomicUsize::new(0) }
    }

    /// HTTP client reading its credential from `LLM_API_KEY`.
    #[cfg(feature = "live")]
    pub fn live_from_env(config: ClientConfig) -> Result<Self, ReferentError> {
        let key = std::env::var("LLM_API_KEY")
            .map_err(|_| ReferentError::Transport { type_name: String::new(), attempts: 0, last: "LLM_API_KEY is not set".into() })?;
        let transport = HttpTransport { endpoint: config.endpoint.clone(), api_key: key };
        Ok(Self::new(config, Some(Box::new(transport))))
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn is_live(&self) -> bool {
        self.transport.is_some()
    }

    /// Transport calls made so far, retries included.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn throttle(&self) {
        if self.config.requests_per_minute == 0 {
            return;
        }
        let gap = Duration::from_secs_f64(60.0 / self.config.requests_per_minute as f64);
        let mut last = self.last_request.lock().expect("poisoned");
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < gap {
                std::thread::sleep(gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    /// Send `prompt`, retrying with exponential backoff. `what` names the
    /// request in errors.
    pub fn complete(&self, what: &str, prompt: &str) -> Result<String, ReferentError> {
        let Some(transport) = &self.transport else {
            return Err(ReferentError::CacheMiss(what.to_string()));
        };
        let attempts = self.config.max_attempts.max(1);
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            self.throttle();
            self.requests.fetch_add(1, Ordering::SeqCst);
            match transport.complete(prompt, &self.config.generation) {
                Ok(text) => return Ok(text),
                Err(e) => last = e.0,
            }
        }
        Err(ReferentError::Transport { type_name: what.to_string(), attempts, last })
    }
}

pub fn definition_prompt(type_name: &str) -> String {
    format!("Please generate an automatic definition for the entity type '{type_name}'.")
}

/// Cache first; on a miss ask the client and record the answer with its
/// generation settings.
pub fn fetch_definition(type_name: &str, cache: &DefinitionCache, client: &LlmClient) -> Result<TypeDefinition, ReferentError> {
    if let Some(d) = cache.get(type_name) {
        return Ok(d);
    }
    let text = client.complete(type_name, &definition_prompt(type_name))?;
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(ReferentError::EmptyDefinition(type_name.to_string()));
    }
    let def = TypeDefinition {
        type_name: type_name.to_string(),
        definition_text: text,
        source: DefinitionSource::Llm,
        config: Some(client.config().generation.clone()),
    };
    cache.insert(def.clone())?;
    Ok(def)
}

/// Completions-style JSON endpoint.
#[cfg(feature = "live")]
pub struct HttpTransport {
    pub endpoint: String,
    pub api_key: String,
}

#[cfg(feature = "live")]
impl CompletionTransport for HttpTransport {
    fn complete(&self, prompt: &str, generation: &GenerationConfig) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": generation.model,
            "prompt": prompt,
            "temperature": generation.temperature,
            "max_tokens": generation.max_length,
        });
        let mut resp = ureq::post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| TransportError(e.to_string()))?;
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| TransportError(e.to_string()))?;
        v["choices"][0]["text"]
            .as_str()
            .or_else(|| v["choices"][0]["message"]["content"].as_str())
            .map(str::to_string)
            .ok_or_else(|| TransportError(format!("unexpected response shape: {v}")))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicU32;

    use super::*;

    struct Flaky {
        failures: AtomicU32,
    }

    impl CompletionTransport for Flaky {
        fn complete(&self, prompt: &str, _: &GenerationConfig) -> Result<String, TransportError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(TransportError("503".into()));
            }
            Ok(format!("A definition answering: {prompt}"))
        }
    }

    fn quick(failures: u32) -> LlmClient {
        let config = ClientConfig { initial_backoff_ms: 1, requests_per_minute: 0, max_attempts: 3, ..Default::default() };
        LlmClient::new(config, Some(Box::new(Flaky { failures: AtomicU32::new(failures) })))
    }

    #[test]
    fn offline_miss_names_the_type() {
        let err = fetch_definition("corporation", &DefinitionCache::bundled(), &LlmClient::offline()).unwrap_err();
        assert!(err.to_string().contains("corporation"));
    }

    #[test]
    fn cached_fetch_makes_no_requests() {
        let cache = DefinitionCache::bundled();
        let client = quick(0);
        let a = fetch_definition("location", &cache, &client).unwrap();
        let b = fetch_definition("location", &cache, &client).unwrap();
        assert_eq!(a, b);
        assert_eq!(client.requests(), 0);
    }

    #[test]
    fn live_answer_is_cached_with_config() {
        let cache = DefinitionCache::empty();
        let client = quick(2);
        let d = fetch_definition("corporation", &cache, &client).unwrap();
        assert_eq!(client.requests(), 3);
        assert_eq!(d.source, DefinitionSource::Llm);
        assert_eq!(d.config, Some(GenerationConfig::default()));
        assert_eq!(fetch_definition("corporation", &cache, &client).unwrap(), d);
        assert_eq!(client.requests(), 3);
    }

    #[test]
    fn retries_exhausted() {
        let err = fetch_definition("corporation", &DefinitionCache::empty(), &quick(5)).unwrap_err();
        assert!(matches!(err, ReferentError::Transport { attempts: 3, .. }));
    }
}
