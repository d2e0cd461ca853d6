//! QA dataset loading and the content-addressed disk cache that lets
//! scoring and evaluation replay generations without live endpoints.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate record id '{id}' at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("record '{id}' at line {line} has empty references")]
    EmptyReferences { id: String, line: usize },
    #[error("invalid sampling config: {0}")]
    InvalidSampling(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

/// One question with optional context and one or more reference answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub references: Vec<String>,
}

/// How the M responses for a record are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub m: usize,
    pub temperature: f64,
    pub prompt_template: String,
    pub model_id: String,
    pub max_tokens: usize,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.m < 2 {
            return Err(DatasetError::InvalidSampling(format!(
                "m must be >= 2, got {}",
                self.m
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(DatasetError::InvalidSampling(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens < 1 {
            return Err(DatasetError::InvalidSampling(
                "max_tokens must be >= 1".into(),
            ));
        }
        if !self.prompt_template.contains("{question}") {
            return Err(DatasetError::InvalidSampling(
                "prompt_template must contain a {question} placeholder".into(),
            ));
        }
        Ok(())
    }

    /// Instantiate the template for a record. `{context}` expands to the
    /// record's context when present, empty string otherwise.
    pub fn render_prompt(&self, record: &QaRecord) -> String {
        self.prompt_template
            .replace("{question}", &record.question)
            .replace("{context}", record.context.as_deref().unwrap_or(""))
    }
}

/// One sampled response with its per-token log-probabilities (nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

impl Response {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.tokens.len() != self.token_logprobs.len() {
            return Err(DatasetError::InvalidResponse(format!(
                "{} tokens but {} logprobs",
                self.tokens.len(),
                self.token_logprobs.len()
            )));
        }
        for (i, lp) in self.token_logprobs.iter().enumerate() {
            if !lp.is_finite() || *lp > 0.0 {
                return Err(DatasetError::InvalidResponse(format!(
                    "logprob at position {i} is {lp}, must be finite and <= 0"
                )));
            }
        }
        Ok(())
    }

    /// Joint sequence log-probability: sum of the token log-probs.
    pub fn joint_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

/// The M sampled responses for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSet {
    pub record_id: String,
    pub responses: Vec<Response>,
    pub sampling: SamplingConfig,
}

impl GenerationSet {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.responses.is_empty() {
            return Err(DatasetError::InvalidResponse("no responses".into()));
        }
        self.sampling.validate()?;
        for r in &self.responses {
            r.validate()?;
        }
        Ok(())
    }
}

/// Load a line-delimited dataset. Preserves file order; rejects duplicate
/// ids and empty reference lists with the offending line number.
pub fn load_dataset(path: &Path) -> Result<Vec<QaRecord>, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct RawRecord {
            id: String,
            question: String,
            #[serde(default)]
            context: Option<String>,
            answers: Vec<String>,
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        if raw.question.is_empty() {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                reason: "question is empty".into(),
            });
        }
        if raw.answers.is_empty() || raw.answers.iter().any(|a| a.is_empty()) {
            return Err(DatasetError::EmptyReferences {
                id: raw.id,
                line: line_no,
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: raw.id,
                line: line_no,
            });
        }
        records.push(QaRecord {
            id: raw.id,
            question: raw.question,
            context: raw.context,
            references: raw.answers,
        });
    }
    Ok(records)
}

/// Content-addressed cache key: 64-hex SHA-256 of the canonical
/// serialization of (record_id, model_id, prompt, temperature, m,
/// max_tokens). Pure function of its inputs.
pub fn cache_key(record_id: &str, sampling: &SamplingConfig, prompt: &str) -> String {
    let canonical = serde_json::to_string(&(
        record_id,
        &sampling.model_id,
        prompt,
        sampling.temperature,
        sampling.m,
        sampling.max_tokens,
    ))
    .expect("tuple of primitives always serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn cache_path(cache_dir: &Path, key: &str) -> std::path::PathBuf {
    cache_dir.join(format!("{key}.json"))
}

/// Persist one GenerationSet under its key. Write-to-temp-then-rename so
/// concurrent writers never interleave bytes; last writer wins.
pub fn store_generations(
    set: &GenerationSet,
    key: &str,
    cache_dir: &Path,
) -> Result<(), DatasetError> {
    fs::create_dir_all(cache_dir).map_err(|source| DatasetError::Io {
        path: cache_dir.display().to_string(),
        source,
    })?;
    let target = cache_path(cache_dir, key);
    let mut tmp = tempfile::NamedTempFile::new_in(cache_dir).map_err(|source| DatasetError::Io {
        path: cache_dir.display().to_string(),
        source,
    })?;
    let body = serde_json::to_string_pretty(set).expect("GenerationSet serializes");
    tmp.write_all(body.as_bytes())
        .map_err(|source| DatasetError::Io {
            path: target.display().to_string(),
            source,
        })?;
    tmp.persist(&target).map_err(|e| DatasetError::Io {
        path: target.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Load a cached GenerationSet. Unknown keys and corrupt files both come
/// back as None; corruption is logged.
pub fn load_generations(key: &str, cache_dir: &Path) -> Option<GenerationSet> {
    let path = cache_path(cache_dir, key);
    let body = fs::read_to_string(&path).ok()?;
    match serde_json::from_str::<GenerationSet>(&body) {
        Ok(set) => Some(set),
        Err(e) => {
            log::warn!("corrupt cache file {}: {e}", path.display());
            None
        }
    }
}
