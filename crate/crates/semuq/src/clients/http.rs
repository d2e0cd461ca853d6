//! HTTP-backed clients speaking the de-facto chat-completions and
//! embeddings wire shapes, plus a minimal /nli contract for entailment.
//! All three share retry-with-backoff, a concurrency bound, and disk or
//! in-memory caches so a second run over the same inputs stays offline.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    ClientError, EmbeddingClient, EndpointConfig, EntailmentClient, GenerationClient, Semaphore,
};
use crate::dataset::{self, GenerationSet, Response, SamplingConfig};
use crate::entropy::EntailmentLabel;
use crate::geometry::EmbeddingVector;

/// Transport abstraction so retry/caching logic is testable without a
/// network. The real implementation is [`ReqwestTransport`].
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, api_key: Option<&str>) -> Result<Value, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout_secs: f64) -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs_f64(timeout_secs))
                .build()
                .expect("reqwest client builds"),
        }
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, body: &Value, api_key: Option<&str>) -> Result<Value, String> {
        log::debug!("POST {url} body={body}");
        let mut req = self.client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let value: Value = resp.json().map_err(|e| e.to_string())?;
        log::debug!("POST {url} -> {status} (api key redacted)");
        if !status.is_success() {
            return Err(format!("HTTP {status}: {value}"));
        }
        Ok(value)
    }
}

/// Shared retry loop: exponential backoff, base from config, factor 2.
fn post_with_retries(
    transport: &dyn Transport,
    semaphore: &Semaphore,
    config: &EndpointConfig,
    url: &str,
    body: &Value,
) -> Result<Value, ClientError> {
    let _permit = semaphore.acquire();
    let mut last_err = String::new();
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            let delay = config.backoff_base_secs * 2f64.powi(attempt as i32 - 1);
            std::thread::sleep(Duration::from_secs_f64(delay));
        }
        match transport.post_json(url, body, config.api_key.as_deref()) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = e,
        }
    }
    Err(ClientError::Transport {
        attempts: config.max_retries + 1,
        reason: last_err,
    })
}

/// Chat-completions client. Results are cached one file per
/// (record, sampling config) key; a cache hit never touches the network.
pub struct HttpGenerationClient {
    transport: Box<dyn Transport>,
    config: EndpointConfig,
    semaphore: Semaphore,
    cache_dir: PathBuf,
}

impl HttpGenerationClient {
    pub fn new(transport: Box<dyn Transport>, config: EndpointConfig, cache_dir: PathBuf) -> Self {
        let semaphore = Semaphore::new(config.max_concurrency);
        Self {
            transport,
            config,
            semaphore,
            cache_dir,
        }
    }

    pub fn from_config(config: EndpointConfig, cache_dir: PathBuf) -> Self {
        let transport = Box::new(ReqwestTransport::new(config.timeout_secs));
        Self::new(transport, config, cache_dir)
    }

    fn parse_choice(choice: &Value) -> Result<Response, ClientError> {
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::MalformedResponse("choice missing message.content".into()))?
            .to_string();
        let entries = choice
            .pointer("/logprobs/content")
            .and_then(Value::as_array)
            .ok_or(ClientError::LogprobsUnsupported)?;
        let mut tokens = Vec::with_capacity(entries.len());
        let mut token_logprobs = Vec::with_capacity(entries.len());
        for entry in entries {
            let token = entry
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| ClientError::MalformedResponse("logprob entry missing token".into()))?;
            let lp = entry
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or(ClientError::LogprobsUnsupported)?;
            tokens.push(token.to_string());
            // guard against backends reporting tiny positive rounding noise
            token_logprobs.push(lp.min(0.0));
        }
        let response = Response {
            text,
            tokens,
            token_logprobs,
        };
        response.validate()?;
        Ok(response)
    }
}

impl GenerationClient for HttpGenerationClient {
    fn generate(&self, prompt: &str, sampling: &SamplingConfig) -> Result<GenerationSet, ClientError> {
        // record identity is carried by the prompt; the key is content-addressed
        let key = dataset::cache_key(prompt, sampling, prompt);
        if let Some(cached) = dataset::load_generations(&key, &self.cache_dir) {
            return Ok(cached);
        }
        let body = json!({
            "model": sampling.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "n": sampling.m,
            "temperature": sampling.temperature,
            "max_tokens": sampling.max_tokens,
            "logprobs": true,
        });
        let url = format!("{}/v1/chat/completions", self.config.base_url);
        let value = post_with_retries(
            self.transport.as_ref(),
            &self.semaphore,
            &self.config,
            &url,
            &body,
        )?;
        let choices = value
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::MalformedResponse("missing choices array".into()))?;
        if choices.len() != sampling.m {
            return Err(ClientError::SampleCountMismatch {
                expected: sampling.m,
                received: choices.len(),
            });
        }
        let responses = choices
            .iter()
            .map(Self::parse_choice)
            .collect::<Result<Vec<_>, _>>()?;
        let set = GenerationSet {
            record_id: key.clone(),
            responses,
            sampling: sampling.clone(),
        };
        dataset::store_generations(&set, &key, &self.cache_dir)
            .map_err(|e| ClientError::CacheIo(e.to_string()))?;
        Ok(set)
    }
}

/// Embeddings client. Caches per text digest; misses are batched in
/// chunks of at most 64.
pub struct HttpEmbeddingClient {
    transport: Box<dyn Transport>,
    config: EndpointConfig,
    semaphore: Semaphore,
    model_id: String,
    cache: Mutex<std::collections::HashMap<[u8; 32], Vec<f64>>>,
}

const EMBED_BATCH: usize = 64;

impl HttpEmbeddingClient {
    pub fn new(transport: Box<dyn Transport>, config: EndpointConfig, model_id: String) -> Self {
        let semaphore = Semaphore::new(config.max_concurrency);
        Self {
            transport,
            config,
            semaphore,
            model_id,
            cache: Mutex::new(std::collections::HashMap::new()),
        }
    }

    pub fn from_config(config: EndpointConfig, model_id: String) -> Self {
        let transport = Box::new(ReqwestTransport::new(config.timeout_secs));
        Self::new(transport, config, model_id)
    }

    fn text_digest(&self, text: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.model_id.as_bytes());
        hasher.update([0x1f]);
        hasher.update(text.as_bytes());
        hasher.finalize().into()
    }
}

impl EmbeddingClient for HttpEmbeddingClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        let mut raw: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing: Vec<usize> = Vec::new();
        {
            let cache = self.cache.lock().unwrap();
            for (i, text) in texts.iter().enumerate() {
                match cache.get(&self.text_digest(text)) {
                    Some(v) => raw[i] = Some(v.clone()),
                    None => missing.push(i),
                }
            }
        }
        for chunk in missing.chunks(EMBED_BATCH) {
            let inputs: Vec<&str> = chunk.iter().map(|&i| texts[i].as_str()).collect();
            let body = json!({"model": self.model_id, "input": inputs});
            let url = format!("{}/v1/embeddings", self.config.base_url);
            let value = post_with_retries(
                self.transport.as_ref(),
                &self.semaphore,
                &self.config,
                &url,
                &body,
            )?;
            let data = value
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| ClientError::MalformedResponse("missing data array".into()))?;
            if data.len() != chunk.len() {
                return Err(ClientError::MalformedResponse(format!(
                    "embedding batch returned {} items for {} inputs",
                    data.len(),
                    chunk.len()
                )));
            }
            let mut cache = self.cache.lock().unwrap();
            for (&idx, item) in chunk.iter().zip(data) {
                let values: Vec<f64> = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ClientError::MalformedResponse("item missing embedding".into()))?
                    .iter()
                    .map(|v| v.as_f64().unwrap_or(f64::NAN))
                    .collect();
                cache.insert(self.text_digest(&texts[idx]), values.clone());
                raw[idx] = Some(values);
            }
        }
        let mut out = Vec::with_capacity(texts.len());
        let mut dim: Option<usize> = None;
        for values in raw.into_iter().map(Option::unwrap) {
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(ClientError::DimensionDisagreement(d, values.len()))
                }
                _ => {}
            }
            out.push(EmbeddingVector::new(values)?);
        }
        Ok(out)
    }
}

/// Entailment client speaking POST /nli {premise, hypothesis} -> {label}.
pub struct HttpEntailmentClient {
    transport: Box<dyn Transport>,
    config: EndpointConfig,
    semaphore: Semaphore,
    cache: Mutex<std::collections::HashMap<[u8; 32], EntailmentLabel>>,
}

impl HttpEntailmentClient {
    pub fn new(transport: Box<dyn Transport>, config: EndpointConfig) -> Self {
        let semaphore = Semaphore::new(config.max_concurrency);
        Self {
            transport,
            config,
            semaphore,
            cache: Mutex::new(std::collections::HashMap::new()),
        }
    }

    pub fn from_config(config: EndpointConfig) -> Self {
        let transport = Box::new(ReqwestTransport::new(config.timeout_secs));
        Self::new(transport, config)
    }
}

impl EntailmentClient for HttpEntailmentClient {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentLabel, ClientError> {
        let mut hasher = Sha256::new();
        hasher.update(premise.as_bytes());
        hasher.update([0x1f]);
        hasher.update(hypothesis.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        if let Some(label) = self.cache.lock().unwrap().get(&key) {
            return Ok(*label);
        }
        let body = json!({"premise": premise, "hypothesis": hypothesis});
        let url = format!("{}/nli", self.config.base_url);
        let value = post_with_retries(
            self.transport.as_ref(),
            &self.semaphore,
            &self.config,
            &url,
            &body,
        )?;
        let raw = value
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::MalformedResponse("missing label field".into()))?;
        let label =
            EntailmentLabel::parse(raw).ok_or_else(|| ClientError::UnknownLabel(raw.to_string()))?;
        self.cache.lock().unwrap().insert(key, label);
        Ok(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Scriptable fake transport that counts calls and peak concurrency.
    pub struct FakeTransport {
        pub responder: Box<dyn Fn(&str, &Value) -> Result<Value, String> + Send + Sync>,
        pub calls: Arc<AtomicUsize>,
        pub in_flight: Arc<AtomicUsize>,
        pub peak: Arc<AtomicUsize>,
        pub delay: Duration,
    }

    impl FakeTransport {
        fn new(
            responder: impl Fn(&str, &Value) -> Result<Value, String> + Send + Sync + 'static,
        ) -> Self {
            Self {
                responder: Box::new(responder),
                calls: Arc::new(AtomicUsize::new(0)),
                in_flight: Arc::new(AtomicUsize::new(0)),
                peak: Arc::new(AtomicUsize::new(0)),
                delay: Duration::from_millis(0),
            }
        }
    }

    impl Transport for FakeTransport {
        fn post_json(&self, url: &str, body: &Value, _key: Option<&str>) -> Result<Value, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            if !self.delay.is_zero() {
                std::thread::sleep(self.delay);
            }
            let result = (self.responder)(url, body);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            result
        }
    }

    fn fast_config() -> EndpointConfig {
        EndpointConfig {
            base_url: "http://test".into(),
            api_key: None,
            timeout_secs: 1.0,
            max_retries: 2,
            max_concurrency: 2,
            backoff_base_secs: 0.001,
        }
    }

    fn sampling(m: usize) -> SamplingConfig {
        SamplingConfig {
            m,
            temperature: 0.5,
            prompt_template: "{question}".into(),
            model_id: "test-model".into(),
            max_tokens: 16,
        }
    }

    fn chat_response(texts: &[&str]) -> Value {
        json!({
            "choices": texts.iter().map(|t| json!({
                "message": {"content": t},
                "logprobs": {"content": t.split_whitespace().map(|w| json!({
                    "token": w, "logprob": -0.5
                })).collect::<Vec<_>>()}
            })).collect::<Vec<_>>()
        })
    }

    #[test]
    fn generation_caches_and_skips_network_on_hit() {
        let dir = tempfile::tempdir().unwrap();
        let transport = FakeTransport::new(|_, _| Ok(chat_response(&["Paris", "Paris"])));
        let calls = transport.calls.clone();
        let client =
            HttpGenerationClient::new(Box::new(transport), fast_config(), dir.path().into());
        let s = sampling(2);
        let first = client.generate("capital of France?", &s).unwrap();
        let second = client.generate("capital of France?", &s).unwrap();
        assert_eq!(first, second);
        // one network call total
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn generation_sample_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let transport = FakeTransport::new(|_, _| Ok(chat_response(&["a", "b", "c"])));
        let client =
            HttpGenerationClient::new(Box::new(transport), fast_config(), dir.path().into());
        match client.generate("q", &sampling(5)) {
            Err(ClientError::SampleCountMismatch { expected: 5, received: 3 }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn generation_missing_logprobs_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let transport = FakeTransport::new(|_, _| {
            Ok(json!({"choices": [
                {"message": {"content": "a"}},
                {"message": {"content": "b"}},
            ]}))
        });
        let client =
            HttpGenerationClient::new(Box::new(transport), fast_config(), dir.path().into());
        assert!(matches!(
            client.generate("q", &sampling(2)),
            Err(ClientError::LogprobsUnsupported)
        ));
    }

    #[test]
    fn transport_error_reports_attempt_count() {
        let dir = tempfile::tempdir().unwrap();
        let transport = FakeTransport::new(|_, _| Err("connection refused".into()));
        let client =
            HttpGenerationClient::new(Box::new(transport), fast_config(), dir.path().into());
        match client.generate("q", &sampling(2)) {
            Err(ClientError::Transport { attempts: 3, .. }) => {}
            other => panic!("expected transport error with 3 attempts, got {other:?}"),
        }
    }

    #[test]
    fn embedding_batches_and_caches_per_text() {
        let transport = FakeTransport::new(|_, body| {
            let inputs = body["input"].as_array().unwrap();
            Ok(json!({"data": inputs.iter().map(|t| {
                let n = t.as_str().unwrap().len() as f64;
                json!({"embedding": [n, 1.0]})
            }).collect::<Vec<_>>()}))
        });
        let calls = transport.calls.clone();
        let client =
            HttpEmbeddingClient::new(Box::new(transport), fast_config(), "embed-model".into());
        let texts: Vec<String> = (0..100).map(|i| format!("text {i}")).collect();
        let embs = client.embed(&texts).unwrap();
        assert_eq!(embs.len(), 100);
        // 100 misses -> ceil(100/64) = 2 batches
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        // all cached now
        client.embed(&texts).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        // identical texts give identical vectors
        let twice = client
            .embed(&["same".to_string(), "same".to_string()])
            .unwrap();
        assert_eq!(twice[0], twice[1]);
    }

    #[test]
    fn embedding_dimension_disagreement() {
        let transport = FakeTransport::new(|_, body| {
            let inputs = body["input"].as_array().unwrap();
            Ok(json!({"data": inputs.iter().enumerate().map(|(i, _)| {
                json!({"embedding": vec![1.0; 2 + i]})
            }).collect::<Vec<_>>()}))
        });
        let client =
            HttpEmbeddingClient::new(Box::new(transport), fast_config(), "embed-model".into());
        assert!(matches!(
            client.embed(&["a".to_string(), "b".to_string()]),
            Err(ClientError::DimensionDisagreement(2, 3))
        ));
    }

    #[test]
    fn entailment_normalizes_case_and_rejects_unknown() {
        let transport = FakeTransport::new(|_, body| {
            let label = if body["premise"].as_str().unwrap() == "weird" {
                "maybe"
            } else {
                "ENTAILMENT"
            };
            Ok(json!({"label": label}))
        });
        let client = HttpEntailmentClient::new(Box::new(transport), fast_config());
        assert_eq!(
            client.judge("a", "b").unwrap(),
            EntailmentLabel::Entailment
        );
        match client.judge("weird", "b") {
            Err(ClientError::UnknownLabel(l)) => assert_eq!(l, "maybe"),
            other => panic!("expected unknown label, got {other:?}"),
        }
    }

    #[test]
    fn in_flight_requests_never_exceed_max_concurrency() {
        let mut transport = FakeTransport::new(|_, _| Ok(json!({"label": "neutral"})));
        transport.delay = Duration::from_millis(10);
        let peak = transport.peak.clone();
        let client = Arc::new(HttpEntailmentClient::new(
            Box::new(transport),
            fast_config(),
        ));
        let mut handles = Vec::new();
        for i in 0..8 {
            let client = client.clone();
            handles.push(std::thread::spawn(move || {
                client.judge(&format!("p{i}"), "h").unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
