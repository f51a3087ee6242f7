//! LLM client abstraction: request/response wire types, a remote
//! chat-completions backend, a content-addressed response cache and a caller
//! that adds retries with exponential backoff.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{RenderedPrompt, PROMPT_VERSION};
use crate::text::{approx_token_count, sha256_hex};

pub const API_KEY_ENV: &str = "OMIGRAPH_API_KEY";
pub const API_BASE_ENV: &str = "OMIGRAPH_API_BASE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Remote,
    Stub,
}

impl std::str::FromStr for ClientKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remote" => Ok(ClientKind::Remote),
            "stub" => Ok(ClientKind::Stub),
            other => Err(Error::invalid(format!("unknown client kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LlmClientSpec {
    pub kind: ClientKind,
    pub model_name: String,
    pub prompt_version: String,
    pub max_parallel: usize,
    pub retry_limit: usize,
    /// Base delay of the exponential backoff between retries.
    pub backoff_ms: u64,
}

impl LlmClientSpec {
    pub fn stub() -> Self {
        LlmClientSpec {
            kind: ClientKind::Stub,
            model_name: "stub".into(),
            prompt_version: PROMPT_VERSION.into(),
            max_parallel: 4,
            retry_limit: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system: String,
    pub context: String,
    pub model_name: String,
}

impl LlmRequest {
    pub fn new(prompt: RenderedPrompt, model_name: &str) -> Self {
        LlmRequest {
            system: prompt.system,
            context: prompt.context,
            model_name: model_name.to_string(),
        }
    }

    /// `sha256(system + context + model)`.
    pub fn cache_key(&self) -> String {
        sha256_hex(&[&self.system, &self.context, &self.model_name])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl LlmResponse {
    /// A response whose token counts use the offline approximation.
    pub fn approximate(req: &LlmRequest, text: String) -> Self {
        LlmResponse {
            prompt_tokens: approx_token_count(&req.system) + approx_token_count(&req.context),
            completion_tokens: approx_token_count(&text),
            text,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse>;
}

/// OpenAI-compatible chat-completions endpoint. The key comes from
/// `OMIGRAPH_API_KEY`; the base URL from `OMIGRAPH_API_BASE`.
pub struct RemoteBackend {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn from_env() -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        let base_url =
            std::env::var(API_BASE_ENV).unwrap_or_else(|_| "https://api.openai.com/v1".into());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Ok(RemoteBackend {
            base_url,
            api_key,
            agent,
        })
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        let body = serde_json::json!({
            "model": req.model_name,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.context},
            ],
        });
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let llm_err = |msg: String| Error::Llm { attempts: 1, msg };
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| llm_err(e.to_string()))?;
        let parsed: ChatCompletion = resp
            .body_mut()
            .read_json()
            .map_err(|e| llm_err(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| llm_err("response has no message content".into()))?;
        let usage = parsed.usage.ok_or_else(|| llm_err("response has no usage block".into()))?;
        Ok(LlmResponse {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CachedResponse {
    pub key: String,
    pub model_name: String,
    pub prompt_version: String,
    pub request: LlmRequest,
    pub response: LlmResponse,
}

/// One JSON record per call, named by the request's cache key. Entries with
/// a different prompt version are treated as misses.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    map: RwLock<HashMap<String, CachedResponse>>,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            map: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ResponseCache {
            dir: Some(dir.to_path_buf()),
            ..Self::in_memory()
        })
    }

    pub fn get(&self, req: &LlmRequest, prompt_version: &str) -> Option<LlmResponse> {
        let key = req.cache_key();
        let hit = |c: &CachedResponse| (c.prompt_version == prompt_version).then(|| c.response.clone());
        if let Some(c) = self.map.read().unwrap().get(&key) {
            return hit(c);
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let rec: CachedResponse = serde_json::from_slice(&fs::read(path).ok()?).ok()?;
        let out = hit(&rec);
        self.map.write().unwrap().insert(key, rec);
        out
    }

    pub fn put(&self, req: &LlmRequest, prompt_version: &str, response: &LlmResponse) -> Result<()> {
        let key = req.cache_key();
        let rec = CachedResponse {
            key: key.clone(),
            model_name: req.model_name.clone(),
            prompt_version: prompt_version.to_string(),
            request: req.clone(),
            response: response.clone(),
        };
        let _guard = self.write_lock.lock().unwrap();
        if let Some(dir) = &self.dir {
            fs::write(dir.join(format!("{key}.json")), serde_json::to_vec_pretty(&rec)?)?;
        }
        self.map.write().unwrap().insert(key, rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token usage of one logical call (cache hits keep their recorded usage).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub item_id: String,
    pub method: String,
    pub key: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cached: bool,
}

pub struct LlmCaller<'a> {
    pub spec: &'a LlmClientSpec,
    pub backend: &'a dyn LlmBackend,
    pub cache: &'a ResponseCache,
}

impl LlmCaller<'_> {
    /// Serves from cache or calls the backend, retrying up to `retry_limit`
    /// extra times with exponentially growing delays.
    pub fn call(&self, req: &LlmRequest, item_id: &str, method: &str) -> Result<(LlmResponse, CallRecord)> {
        let record = |resp: &LlmResponse, cached: bool| CallRecord {
            item_id: item_id.to_string(),
            method: method.to_string(),
            key: req.cache_key(),
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
            cached,
        };
        if let Some(resp) = self.cache.get(req, &self.spec.prompt_version) {
            let rec = record(&resp, true);
            return Ok((resp, rec));
        }
        let mut last_err = String::new();
        for attempt in 0..=self.spec.retry_limit {
            if attempt > 0 && self.spec.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.spec.backoff_ms << (attempt - 1).min(10)));
            }
            match self.backend.complete(req) {
                Ok(resp) => {
                    self.cache.put(req, &self.spec.prompt_version, &resp)?;
                    let rec = record(&resp, false);
                    return Ok((resp, rec));
                }
                Err(e) => {
                    log::warn!("llm call for `{item_id}` failed (attempt {}): {e}", attempt + 1);
                    last_err = e.to_string();
                }
            }
        }
        Err(Error::Llm {
            attempts: self.spec.retry_limit + 1,
            msg: last_err,
        })
    }
}
