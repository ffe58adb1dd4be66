//! Uniform access to chat-completion and embedding providers.
//!
//! The gateway fronts a [`Provider`] with a content-addressed response cache,
//! retry-with-backoff for transient failures, and a bounded parallel map for
//! fan-out stages. With a warm cache a whole pipeline run performs zero
//! provider calls, which is what makes reruns reproducible: the cache, not
//! the provider, is the source of determinism.

pub mod http;
pub mod mock;

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failure: {0}")]
    Auth(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("input exceeds the provider context window: {0}")]
    ContextOverflow(String),
    #[error("provider returned an empty response")]
    EmptyResponse,
    #[error("embedding dimensionality mismatch within batch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cache I/O at {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A chat-completion request. Hashing every field into the cache key makes
/// equal requests collide and any field change miss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub temperature: f64,
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.system_prompt.is_empty() || self.user_prompt.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "prompts must be non-empty".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub request_digest: String,
    pub from_cache: bool,
    pub usage: Usage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f32>,
    pub source_text_digest: String,
}

/// Raw provider reply before caching metadata is attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderChat {
    pub text: String,
    pub usage: Usage,
}

/// A chat + embedding backend. Implementations must be safe to call from
/// multiple threads.
pub trait Provider: Send + Sync {
    fn name(&self) -> &'static str;
    /// True when calls leave the process (HTTP); the mock returns false.
    fn is_network(&self) -> bool;
    fn chat(&self, req: &ChatRequest) -> Result<ProviderChat, GatewayError>;
    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
}

/// Stable 256-bit content hash of a chat request; equal requests have equal
/// keys and any byte difference (including whitespace) yields a new key.
pub fn cache_key(req: &ChatRequest) -> String {
    let canonical = serde_json::json!({
        "kind": "chat",
        "model_id": req.model_id,
        "temperature": req.temperature,
        "system_prompt": req.system_prompt,
        "user_prompt": req.user_prompt,
        "max_output_tokens": req.max_output_tokens,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

fn embed_cache_key(model_id: &str, text: &str) -> String {
    let canonical = serde_json::json!({
        "kind": "embed",
        "model_id": model_id,
        "text": text,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GatewayStats {
    pub provider_calls: u64,
    pub network_calls: u64,
    pub cache_hits: u64,
}

#[derive(Serialize, Deserialize)]
struct CachedChat {
    request: ChatRequest,
    response: ProviderChat,
}

#[derive(Serialize, Deserialize)]
struct CachedEmbedding {
    model_id: String,
    text: String,
    values: Vec<f32>,
}

/// Provider front end with caching, retries and a concurrency bound.
pub struct Gateway {
    provider: Box<dyn Provider>,
    cache_dir: Option<PathBuf>,
    max_attempts: u32,
    backoff: Duration,
    parallelism: usize,
    provider_calls: AtomicU64,
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Gateway {
    pub fn new(provider: Box<dyn Provider>, cache_dir: Option<PathBuf>) -> Self {
        Self {
            provider,
            cache_dir,
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            parallelism: 4,
            provider_calls: AtomicU64::new(0),
            network_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_parallelism(mut self, bound: usize) -> Self {
        self.parallelism = bound.max(1);
        self
    }

    pub fn with_retry(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn provider_name(&self) -> &'static str {
        self.provider.name()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            provider_calls: self.provider_calls.load(Ordering::Relaxed),
            network_calls: self.network_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    /// Complete a chat request, consulting the cache first and retrying
    /// transient provider failures with exponential backoff.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let digest = cache_key(req);

        if let Some(cached) = self.read_cache::<CachedChat>(&digest)? {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(ChatResponse {
                text: cached.response.text,
                request_digest: digest,
                from_cache: true,
                usage: cached.response.usage,
            });
        }

        let reply = self.call_with_retries(|| self.provider.chat(req))?;
        if reply.text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        self.write_cache(
            &digest,
            &CachedChat {
                request: req.clone(),
                response: reply.clone(),
            },
        )?;
        Ok(ChatResponse {
            text: reply.text,
            request_digest: digest,
            from_cache: false,
            usage: reply.usage,
        })
    }

    /// Embed a batch of texts, order-preserving, with per-text caching.
    pub fn embed(
        &self,
        texts: &[String],
        model_id: &str,
    ) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(GatewayError::InvalidRequest(
                "embedding input must be non-empty texts".to_string(),
            ));
        }

        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let mut misses: Vec<usize> = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let key = embed_cache_key(model_id, text);
            if let Some(cached) = self.read_cache::<CachedEmbedding>(&key)? {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                out[i] = Some(EmbeddingVector {
                    model_id: model_id.to_string(),
                    values: cached.values,
                    source_text_digest: sha256_hex(text.as_bytes()),
                });
            } else {
                misses.push(i);
            }
        }

        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.call_with_retries(|| self.provider.embed(model_id, &batch))?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::Provider(format!(
                    "embedding batch returned {} vectors for {} inputs",
                    vectors.len(),
                    batch.len()
                )));
            }
            let dim = vectors[0].len();
            for values in &vectors {
                if values.len() != dim {
                    return Err(GatewayError::DimensionMismatch {
                        expected: dim,
                        got: values.len(),
                    });
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(GatewayError::Provider(
                        "embedding contains non-finite components".to_string(),
                    ));
                }
            }
            for (&i, values) in misses.iter().zip(vectors) {
                let key = embed_cache_key(model_id, &texts[i]);
                self.write_cache(
                    &key,
                    &CachedEmbedding {
                        model_id: model_id.to_string(),
                        text: texts[i].clone(),
                        values: values.clone(),
                    },
                )?;
                out[i] = Some(EmbeddingVector {
                    model_id: model_id.to_string(),
                    values,
                    source_text_digest: sha256_hex(texts[i].as_bytes()),
                });
            }
        }

        Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
    }

    /// Apply `f` to each item on up to `parallelism` worker threads,
    /// preserving input order. Returns the first error encountered.
    pub fn map_bounded<T, R, E, F>(&self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(usize, &T) -> Result<R, E> + Sync,
    {
        let workers = self.parallelism.min(items.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<R, E>>>> =
            Mutex::new((0..items.len()).map(|_| None).collect());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let result = f(i, &items[i]);
                    slots.lock().expect("worker slot lock")[i] = Some(result);
                });
            }
        });

        let slots = slots.into_inner().expect("worker slot lock");
        let mut out = Vec::with_capacity(items.len());
        for slot in slots {
            out.push(slot.expect("worker filled every slot")?);
        }
        Ok(out)
    }

    fn call_with_retries<R>(
        &self,
        call: impl Fn() -> Result<R, GatewayError>,
    ) -> Result<R, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.provider_calls.fetch_add(1, Ordering::Relaxed);
            if self.provider.is_network() {
                self.network_calls.fetch_add(1, Ordering::Relaxed);
            }
            match call() {
                Err(GatewayError::Transient(reason)) if attempt < self.max_attempts => {
                    let delay = self.backoff * 2u32.saturating_pow(attempt - 1);
                    log::warn!(
                        "transient provider error (attempt {attempt}/{}): {reason}; retrying in {delay:?}",
                        self.max_attempts
                    );
                    std::thread::sleep(delay);
                }
                Err(GatewayError::Transient(reason)) => {
                    return Err(GatewayError::Provider(format!(
                        "{reason} (after {attempt} attempts)"
                    )))
                }
                other => return other,
            }
        }
    }

    fn cache_path(&self, digest: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{digest}.json")))
    }

    fn read_cache<T: serde::de::DeserializeOwned>(
        &self,
        digest: &str,
    ) -> Result<Option<T>, GatewayError> {
        let Some(path) = self.cache_path(digest) else {
            return Ok(None);
        };
        if !path.exists() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&path).map_err(|source| GatewayError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        match serde_json::from_str(&raw) {
            Ok(v) => Ok(Some(v)),
            Err(e) => {
                // A corrupt entry is treated as a miss rather than a hard stop.
                log::warn!("discarding unreadable cache entry {}: {e}", path.display());
                Ok(None)
            }
        }
    }

    fn write_cache<T: Serialize>(&self, digest: &str, value: &T) -> Result<(), GatewayError> {
        let Some(path) = self.cache_path(digest) else {
            return Ok(());
        };
        let dir = path.parent().expect("cache path has a parent");
        let wrap = |source: std::io::Error| GatewayError::Cache {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(wrap)?;
        // Write-then-rename so concurrent readers never observe a partial file.
        let tmp = dir.join(format!(".{digest}.tmp-{}", std::process::id()));
        let body = serde_json::to_string_pretty(value).expect("cache entries serialize");
        fs::write(&tmp, body).map_err(wrap)?;
        fs::rename(&tmp, &path).map_err(wrap)?;
        Ok(())
    }
}

/// Cosine similarity of two vectors; 0.0 when either has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| f64::from(*y) * f64::from(*y)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
