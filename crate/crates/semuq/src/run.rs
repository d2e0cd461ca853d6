//! Batch pipeline: generate -> score -> evaluate -> report, plus the toy
//! ASEU train/score stages, all driven by one TOML config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::Deserialize;
use thiserror::Error;

use crate::aseu::{
    self, PromptKind, ScoringConfig, SyntheticGrammar, ToyLmConfig,
    TrainOptions,
};
use crate::clients::{
    EmbeddingClient, EndpointConfig, EntailmentClient, GenerationClient, HttpEmbeddingClient,
    HttpEntailmentClient, HttpGenerationClient, MockEmbedder, MockEntailer, MockLlm,
    QuestionContextOracle,
};
use crate::dataset::{
    cache_key, load_dataset, load_generations, store_generations, GenerationSet, QaRecord,
    SamplingConfig,
};
use crate::entropy::{
    cluster, cluster_distribution, lnpe, predictive_entropy, semantic_entropy, ClusterProbMode,
    Method,
};
use crate::evaluation::{
    auroc, emit_report, label_correct, roc_curve, youden_point, LabeledScore, ReportRow,
};
use crate::geometry;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{failed} of {total} records failed; see {failures_csv}")]
    PartialFailure {
        failed: usize,
        total: usize,
        failures_csv: String,
    },
    #[error("no cached generations for record '{0}'; run `generate` first")]
    MissingCache(String),
    #[error("malformed {file}: {reason}")]
    MalformedFile { file: String, reason: String },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Client(#[from] crate::clients::ClientError),
    #[error(transparent)]
    Entropy(#[from] crate::entropy::EntropyError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Aseu(#[from] crate::aseu::AseuError),
    #[error("I/O failure at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl RunError {
    /// Process exit code: 2 for config problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How a record's correctness label is derived from its M responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    /// Judge the first sampled response (the answer a user would see).
    #[default]
    First,
    /// Correct if any response matches a reference.
    Any,
    /// Correct if more than half the responses match.
    Majority,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EndpointSection {
    pub base_url: String,
    /// Model name sent to embedding endpoints.
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> usize {
    3
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff() -> f64 {
    1.0
}

impl EndpointSection {
    fn endpoint_config(&self) -> EndpointConfig {
        let mut cfg = EndpointConfig::new(self.base_url.clone());
        cfg.timeout_secs = self.timeout_secs;
        cfg.max_retries = self.max_retries;
        cfg.max_concurrency = self.max_concurrency;
        cfg.backoff_base_secs = self.backoff_base_secs;
        cfg
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct Endpoints {
    pub generation: Option<EndpointSection>,
    pub embedding: Option<EndpointSection>,
    pub entailment: Option<EndpointSection>,
}

fn default_toy_lm() -> ToyLmConfig {
    ToyLmConfig::recommended(0)
}

fn default_train_options() -> TrainOptions {
    TrainOptions::recommended()
}

fn default_scoring() -> ScoringConfig {
    ScoringConfig {
        k_samples: 16,
        ..ScoringConfig::default()
    }
}

fn default_corpus_size() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
pub struct AseuSection {
    #[serde(default = "default_toy_lm")]
    pub model: ToyLmConfig,
    #[serde(default = "default_train_options")]
    pub train: TrainOptions,
    #[serde(default = "default_scoring")]
    pub scoring: ScoringConfig,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    /// Checkpoint path; defaults to <out_dir>/aseu_model.json.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for AseuSection {
    fn default() -> Self {
        Self {
            model: default_toy_lm(),
            train: default_train_options(),
            scoring: default_scoring(),
            corpus_size: default_corpus_size(),
            checkpoint: None,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Seu, Method::Se, Method::Pe, Method::Lnpe]
}

fn default_rouge_threshold() -> f64 {
    0.3
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".semuq-cache")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// The whole pipeline configuration, loaded from TOML. CLI flags override
/// `cache_dir`, `out_dir`, `seed`, and `mock` after loading.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Swap every client for a seeded deterministic mock.
    #[serde(default)]
    pub mock: bool,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_rouge_threshold")]
    pub rouge_threshold: f64,
    #[serde(default)]
    pub correctness: Correctness,
    /// Dataset label in reports; defaults to the dataset file stem.
    #[serde(default)]
    pub dataset_name: Option<String>,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub aseu: AseuSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| RunError::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.sampling
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.methods.is_empty() {
            return Err(RunError::Config("methods must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(RunError::Config(format!("method '{m}' listed twice")));
            }
        }
        if !(0.0..1.0).contains(&self.rouge_threshold) {
            return Err(RunError::Config(format!(
                "rouge_threshold must be in [0, 1), got {}",
                self.rouge_threshold
            )));
        }
        if !self.mock {
            if self.methods.contains(&Method::Seu) && self.endpoints.embedding.is_none() {
                return Err(RunError::Config(
                    "method 'seu' needs [endpoints.embedding] or mock = true".into(),
                ));
            }
            if self.methods.contains(&Method::Se) && self.endpoints.entailment.is_none() {
                return Err(RunError::Config(
                    "method 'se' needs [endpoints.entailment] or mock = true".into(),
                ));
            }
        }
        self.aseu
            .model
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.aseu.scoring.k_samples < 2 {
            return Err(RunError::Config("aseu scoring k_samples must be >= 2".into()));
        }
        Ok(())
    }

    pub fn apply_overrides(
        &mut self,
        cache_dir: Option<PathBuf>,
        out_dir: Option<PathBuf>,
        seed: Option<u64>,
        mock: bool,
    ) {
        if let Some(dir) = cache_dir {
            self.cache_dir = dir;
        }
        if let Some(dir) = out_dir {
            self.out_dir = dir;
        }
        if let Some(seed) = seed {
            self.seed = seed;
            self.aseu.model.seed = seed;
            self.aseu.scoring.seed = seed;
        }
        if mock {
            self.mock = true;
        }
    }

    pub fn dataset_label(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| {
            self.dataset
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.aseu
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("aseu_model.json"))
    }

    fn generation_concurrency(&self) -> usize {
        self.endpoints
            .generation
            .as_ref()
            .map(|e| e.max_concurrency)
            .unwrap_or_else(default_concurrency)
            .max(1)
    }
}

/// The three backends a run may need. Fields are None when the config
/// neither enables mocks nor names the endpoint.
pub struct Clients {
    pub generation: Option<Arc<dyn GenerationClient>>,
    pub embedding: Option<Arc<dyn EmbeddingClient>>,
    pub entailment: Option<Arc<dyn EntailmentClient>>,
}

pub fn build_clients(cfg: &RunConfig) -> Clients {
    if cfg.mock {
        return Clients {
            generation: Some(Arc::new(MockLlm::new(cfg.seed).with_paraphrase_noise(true))),
            embedding: Some(Arc::new(MockEmbedder::new(cfg.seed, 32))),
            entailment: Some(Arc::new(MockEntailer::new())),
        };
    }
    Clients {
        generation: cfg.endpoints.generation.as_ref().map(|e| {
            Arc::new(HttpGenerationClient::from_config(
                e.endpoint_config(),
                cfg.cache_dir.clone(),
            )) as Arc<dyn GenerationClient>
        }),
        embedding: cfg.endpoints.embedding.as_ref().map(|e| {
            Arc::new(HttpEmbeddingClient::from_config(
                e.endpoint_config(),
                e.model_id.clone().unwrap_or_default(),
            )) as Arc<dyn EmbeddingClient>
        }),
        entailment: cfg.endpoints.entailment.as_ref().map(|e| {
            Arc::new(HttpEntailmentClient::from_config(e.endpoint_config()))
                as Arc<dyn EntailmentClient>
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub total: usize,
    pub cached: usize,
    pub generated: usize,
    pub failed: usize,
}

/// Populate the generation cache for every dataset record using a bounded
/// worker pool. Idempotent: cached records are skipped. Partial failures
/// are collected into failures.csv and reported as an error.
pub fn cmd_generate(
    cfg: &RunConfig,
    client: &Arc<dyn GenerationClient>,
) -> Result<GenerateSummary, RunError> {
    let records = load_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let total = records.len();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let cached = AtomicUsize::new(0);
    let generated = AtomicUsize::new(0);
    let failures: Mutex<Vec<(String, String)>> = Mutex::new(Vec::new());
    let workers = cfg.generation_concurrency().min(total.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= total {
                    break;
                }
                let record = &records[idx];
                let prompt = cfg.sampling.render_prompt(record);
                let key = cache_key(&record.id, &cfg.sampling, &prompt);
                if load_generations(&key, &cfg.cache_dir).is_some() {
                    cached.fetch_add(1, Ordering::SeqCst);
                } else {
                    let outcome = client
                        .generate(&prompt, &cfg.sampling)
                        .map_err(|e| e.to_string())
                        .and_then(|mut set| {
                            set.record_id = record.id.clone();
                            set.validate().map_err(|e| e.to_string())?;
                            store_generations(&set, &key, &cfg.cache_dir)
                                .map_err(|e| e.to_string())
                        });
                    match outcome {
                        Ok(()) => {
                            generated.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(reason) => {
                            failures.lock().unwrap().push((record.id.clone(), reason));
                        }
                    }
                }
                let finished = done.fetch_add(1, Ordering::SeqCst) + 1;
                if finished % 50 == 0 {
                    log::info!("generate: {finished}/{total} records processed");
                }
            });
        }
    });

    let mut failed_rows = failures.into_inner().unwrap();
    failed_rows.sort();
    let summary = GenerateSummary {
        total,
        cached: cached.into_inner(),
        generated: generated.into_inner(),
        failed: failed_rows.len(),
    };
    log::info!(
        "generate: {} total, {} from cache, {} new, {} failed",
        summary.total,
        summary.cached,
        summary.generated,
        summary.failed
    );
    if !failed_rows.is_empty() {
        let path = cfg.out_dir.join("failures.csv");
        let mut body = String::from("record_id,reason\n");
        for (id, reason) in &failed_rows {
            body.push_str(&format!("{},{}\n", id, reason.replace([',', '\n'], ";")));
        }
        std::fs::write(&path, body).map_err(io_err(&path))?;
        return Err(RunError::PartialFailure {
            failed: summary.failed,
            total,
            failures_csv: path.display().to_string(),
        });
    }
    Ok(summary)
}

fn load_cached_set(cfg: &RunConfig, record: &QaRecord) -> Result<GenerationSet, RunError> {
    let prompt = cfg.sampling.render_prompt(record);
    let key = cache_key(&record.id, &cfg.sampling, &prompt);
    load_generations(&key, &cfg.cache_dir).ok_or_else(|| RunError::MissingCache(record.id.clone()))
}

fn score_record(
    record: &QaRecord,
    set: &GenerationSet,
    method: Method,
    clients: &Clients,
) -> Result<f64, RunError> {
    match method {
        Method::Seu => {
            let embedder = clients.embedding.as_ref().ok_or_else(|| {
                RunError::Config("method 'seu' needs an embedding client".into())
            })?;
            let texts: Vec<String> = set.responses.iter().map(|r| r.text.clone()).collect();
            let embeddings = embedder.embed(&texts)?;
            Ok(geometry::seu(&embeddings)?)
        }
        Method::Se => {
            let entailer = clients.entailment.as_ref().ok_or_else(|| {
                RunError::Config("method 'se' needs an entailment client".into())
            })?;
            let oracle = QuestionContextOracle::new(entailer.as_ref());
            let texts: Vec<String> = set.responses.iter().map(|r| r.text.clone()).collect();
            let clustering = cluster(&texts, &record.question, &oracle)?;
            let dist =
                cluster_distribution(&clustering, &set.responses, ClusterProbMode::Likelihood)?;
            Ok(semantic_entropy(&dist))
        }
        Method::Pe => Ok(predictive_entropy(set)?),
        Method::Lnpe => Ok(lnpe(set)?),
        Method::Aseu => Err(RunError::Config(
            "method 'aseu' is scored by the aseu-score subcommand, not score".into(),
        )),
    }
}

/// Score every cached record with every configured method and write
/// scores.csv (rows ordered by record_id then method).
pub fn cmd_score(cfg: &RunConfig, clients: &Clients) -> Result<PathBuf, RunError> {
    let records = load_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let mut rows: Vec<(String, &'static str, f64)> = Vec::new();
    for record in &records {
        let set = load_cached_set(cfg, record)?;
        for &method in &cfg.methods {
            let value = score_record(record, &set, method, clients)?;
            rows.push((record.id.clone(), method.name(), value));
        }
    }
    rows.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    let mut body = String::from("record_id,method,value\n");
    for (id, method, value) in &rows {
        body.push_str(&format!("{id},{method},{value:.6}\n"));
    }
    let path = cfg.out_dir.join("scores.csv");
    std::fs::write(&path, body).map_err(io_err(&path))?;
    log::info!("score: wrote {} rows to {}", rows.len(), path.display());
    Ok(path)
}

fn parse_scores_csv(path: &Path) -> Result<Vec<(String, String, f64)>, RunError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "record_id,method,value" {
                return Err(RunError::MalformedFile {
                    file: path.display().to_string(),
                    reason: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (id, method, value) = (parts.next(), parts.next(), parts.next());
        match (id, method, value.and_then(|v| v.parse::<f64>().ok())) {
            (Some(id), Some(method), Some(value)) => {
                rows.push((id.to_string(), method.to_string(), value))
            }
            _ => {
                return Err(RunError::MalformedFile {
                    file: path.display().to_string(),
                    reason: format!("bad row {}: '{line}'", i + 1),
                })
            }
        }
    }
    Ok(rows)
}

fn record_correct(cfg: &RunConfig, record: &QaRecord) -> Result<bool, RunError> {
    let set = load_cached_set(cfg, record)?;
    let verdicts: Vec<bool> = set
        .responses
        .iter()
        .map(|r| label_correct(&r.text, &record.references, cfg.rouge_threshold))
        .collect::<Result<_, _>>()?;
    Ok(match cfg.correctness {
        Correctness::First => verdicts[0],
        Correctness::Any => verdicts.iter().any(|&v| v),
        Correctness::Majority => verdicts.iter().filter(|&&v| v).count() * 2 > verdicts.len(),
    })
}

/// Join scores.csv with correctness labels and emit report.csv plus one
/// ROC SVG per method.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    let records = load_dataset(&cfg.dataset)?;
    let scores = parse_scores_csv(&cfg.out_dir.join("scores.csv"))?;
    let mut labels: BTreeMap<String, bool> = BTreeMap::new();
    for record in &records {
        labels.insert(record.id.clone(), record_correct(cfg, record)?);
    }
    let mut by_method: BTreeMap<String, Vec<LabeledScore>> = BTreeMap::new();
    for (id, method, value) in scores {
        let correct = *labels.get(&id).ok_or_else(|| RunError::MalformedFile {
            file: "scores.csv".into(),
            reason: format!("record '{id}' not in dataset"),
        })?;
        by_method.entry(method).or_default().push(LabeledScore {
            record_id: id,
            uncertainty: value,
            correct,
        });
    }
    let dataset_label = cfg.dataset_label();
    let mut rows = Vec::new();
    for (method, scored) in &by_method {
        let area = auroc(scored)?;
        let curve = roc_curve(scored)?;
        let youden = youden_point(&curve)?;
        rows.push(ReportRow {
            method: method.clone(),
            dataset: dataset_label.clone(),
            model: cfg.sampling.model_id.clone(),
            auroc: area,
            youden,
            n: scored.len(),
            curve,
        });
    }
    emit_report(&rows, &cfg.out_dir)?;
    let path = cfg.out_dir.join("report.csv");
    log::info!("evaluate: wrote {}", path.display());
    Ok(path)
}

/// Train the toy model on the bundled synthetic grammar; writes the
/// checkpoint and loss_trace.csv under the output directory.
pub fn cmd_aseu_train(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let grammar = SyntheticGrammar::new(cfg.aseu.model.seed, cfg.aseu.model.latent_dim);
    let corpus: Vec<(Vec<usize>, Vec<f64>)> = grammar
        .corpus(cfg.aseu.corpus_size)
        .into_iter()
        .map(|ex| (ex.tokens, ex.target))
        .collect();
    let (params, trace) = aseu::train(&corpus, &cfg.aseu.model, &cfg.aseu.train)?;
    let ckpt = cfg.checkpoint_path();
    aseu::save_checkpoint(&ckpt, &params)?;
    aseu::write_loss_trace(&cfg.out_dir.join("loss_trace.csv"), &trace)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        log::info!(
            "aseu-train: elbo {:.4} -> {:.4} over {} epochs; checkpoint {}",
            first.elbo,
            last.elbo,
            trace.len(),
            ckpt.display()
        );
    }
    Ok(ckpt)
}

/// Score both grammar prompts with the trained checkpoint; emits
/// aseu_scores.csv in the scores.csv schema.
pub fn cmd_aseu_score(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let params = aseu::load_checkpoint(&cfg.checkpoint_path())?;
    let mut rows = Vec::new();
    for (id, kind) in [
        ("prompt_ambiguous", PromptKind::Ambiguous),
        ("prompt_deterministic", PromptKind::Deterministic),
    ] {
        let trace = aseu::score_sequence(&params, &[kind.prompt_token()], &cfg.aseu.scoring)?;
        rows.push((id, trace.score));
    }
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let mut body = String::from("record_id,method,value\n");
    for (id, value) in &rows {
        body.push_str(&format!("{id},aseu,{value:.6}\n"));
    }
    let path = cfg.out_dir.join("aseu_scores.csv");
    std::fs::write(&path, body).map_err(io_err(&path))?;
    log::info!("aseu-score: wrote {}", path.display());
    Ok(path)
}

/// `report` subcommand: re-emit report files from an existing scores.csv
/// (alias for evaluate kept for symmetry with the documented stages).
pub fn cmd_report(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    cmd_evaluate(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::ClientError;
    use std::io::Write as _;

    fn write_dataset(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("qa.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    fn base_config(dir: &Path) -> RunConfig {
        let dataset = write_dataset(
            dir,
            &[
                r#"{"id": "q1", "question": "capital of France?", "answers": ["Paris"]}"#,
                r#"{"id": "q2", "question": "2 plus 2?", "answers": ["4", "four"]}"#,
                r#"{"id": "q3", "question": "color of the sky?", "answers": ["blue"]}"#,
            ],
        );
        RunConfig {
            dataset,
            cache_dir: dir.join("cache"),
            out_dir: dir.join("out"),
            seed: 7,
            mock: true,
            methods: default_methods(),
            rouge_threshold: 0.3,
            correctness: Correctness::First,
            dataset_name: None,
            sampling: SamplingConfig {
                m: 5,
                temperature: 1.0,
                prompt_template: "Q: {question}".into(),
                model_id: "mock-model".into(),
                max_tokens: 32,
            },
            endpoints: Endpoints::default(),
            aseu: AseuSection::default(),
        }
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let toml_text = r#"
dataset = "qa.jsonl"
mock = true

[sampling]
m = 5
temperature = 1.0
prompt_template = "Q: {question}"
model_id = "mock-model"
max_tokens = 32
"#;
        let path = dir.path().join("run.toml");
        std::fs::write(&path, toml_text).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.methods, default_methods());
        assert_eq!(cfg.rouge_threshold, 0.3);
        assert_eq!(cfg.correctness, Correctness::First);
        assert_eq!(cfg.aseu.scoring.k_samples, 16);
        assert_eq!(cfg.aseu.train, TrainOptions::recommended());
        assert_eq!(cfg.aseu.model.hidden_dim, 32);
    }

    #[test]
    fn config_rejects_missing_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.mock = false;
        // seu without an embedding endpoint
        cfg.methods = vec![Method::Seu];
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        // se without an entailment endpoint
        cfg.methods = vec![Method::Se];
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        // pe needs nothing beyond generations
        cfg.methods = vec![Method::Pe];
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_duplicates_and_bad_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.methods = vec![Method::Pe, Method::Pe];
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        let mut cfg = base_config(dir.path());
        cfg.rouge_threshold = 1.0;
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
    }

    #[test]
    fn generate_populates_cache_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let clients = build_clients(&cfg);
        let client = clients.generation.clone().unwrap();
        let s1 = cmd_generate(&cfg, &client).unwrap();
        assert_eq!(
            (s1.total, s1.cached, s1.generated, s1.failed),
            (3, 0, 3, 0)
        );
        let n_files = std::fs::read_dir(&cfg.cache_dir).unwrap().count();
        assert_eq!(n_files, 3);
        // second run: all cache hits, nothing rewritten
        let s2 = cmd_generate(&cfg, &client).unwrap();
        assert_eq!(
            (s2.total, s2.cached, s2.generated, s2.failed),
            (3, 3, 0, 0)
        );
    }

    struct FlakyClient {
        inner: MockLlm,
        fail_needle: &'static str,
    }

    impl GenerationClient for FlakyClient {
        fn generate(
            &self,
            prompt: &str,
            sampling: &SamplingConfig,
        ) -> Result<GenerationSet, ClientError> {
            if prompt.contains(self.fail_needle) {
                return Err(ClientError::Transport {
                    attempts: 3,
                    reason: "injected failure".into(),
                });
            }
            self.inner.generate(prompt, sampling)
        }
    }

    #[test]
    fn partial_failure_writes_failures_csv_and_errs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let client: Arc<dyn GenerationClient> = Arc::new(FlakyClient {
            inner: MockLlm::new(7),
            fail_needle: "sky",
        });
        let err = cmd_generate(&cfg, &client).unwrap_err();
        assert!(matches!(
            err,
            RunError::PartialFailure {
                failed: 1,
                total: 3,
                ..
            }
        ));
        assert_eq!(err.exit_code(), 1);
        let failures = std::fs::read_to_string(cfg.out_dir.join("failures.csv")).unwrap();
        assert!(failures.starts_with("record_id,reason\n"));
        assert!(failures.contains("q3"));
        // the two healthy records are still cached
        assert_eq!(std::fs::read_dir(&cfg.cache_dir).unwrap().count(), 2);
    }

    #[test]
    fn score_errors_on_missing_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let clients = build_clients(&cfg);
        match cmd_score(&cfg, &clients) {
            Err(RunError::MissingCache(id)) => assert_eq!(id, "q1"),
            other => panic!("expected MissingCache, got {other:?}"),
        }
    }

    /// The seeded mock answers a question deterministically; use its own
    /// first answer as the reference so the record labels correct.
    fn mock_answer(cfg: &RunConfig, question: &str) -> String {
        let llm = MockLlm::new(cfg.seed).with_paraphrase_noise(true);
        let record = QaRecord {
            id: "probe".into(),
            question: question.into(),
            context: None,
            references: vec!["x".into()],
        };
        let prompt = cfg.sampling.render_prompt(&record);
        llm.generate(&prompt, &cfg.sampling).unwrap().responses[0]
            .text
            .clone()
    }

    #[test]
    fn full_mock_pipeline_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let probe = base_config(dir.path());
        // references chosen so q1/q2 label correct and q3 incorrect
        let lines = [
            format!(
                r#"{{"id": "q1", "question": "capital of France?", "answers": ["{}"]}}"#,
                mock_answer(&probe, "capital of France?")
            ),
            format!(
                r#"{{"id": "q2", "question": "2 plus 2?", "answers": ["{}"]}}"#,
                mock_answer(&probe, "2 plus 2?")
            ),
            r#"{"id": "q3", "question": "color of the sky?", "answers": ["zzzz"]}"#.to_string(),
        ];
        let mut outputs = Vec::new();
        for run in 0..2 {
            let sub = dir.path().join(format!("run{run}"));
            std::fs::create_dir_all(&sub).unwrap();
            let mut cfg = base_config(&sub);
            let line_refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            cfg.dataset = write_dataset(&sub, &line_refs);
            let clients = build_clients(&cfg);
            cmd_generate(&cfg, clients.generation.as_ref().unwrap()).unwrap();
            let scores_path = cmd_score(&cfg, &clients).unwrap();
            let report_path = cmd_evaluate(&cfg).unwrap();
            outputs.push((
                std::fs::read(scores_path).unwrap(),
                std::fs::read(report_path).unwrap(),
            ));
        }
        assert_eq!(outputs[0].0, outputs[1].0, "scores.csv differs across runs");
        assert_eq!(outputs[0].1, outputs[1].1, "report.csv differs across runs");
    }

    #[test]
    fn scores_csv_rows_are_sorted_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let clients = build_clients(&cfg);
        cmd_generate(&cfg, clients.generation.as_ref().unwrap()).unwrap();
        let path = cmd_score(&cfg, &clients).unwrap();
        let rows = parse_scores_csv(&path).unwrap();
        assert_eq!(rows.len(), 3 * cfg.methods.len());
        let keys: Vec<(String, String)> = rows
            .iter()
            .map(|(id, m, _)| (id.clone(), m.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for (_, _, value) in &rows {
            assert!(value.is_finite());
        }
    }

    #[test]
    fn identical_scripted_responses_score_zero_seu_and_se() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.methods = vec![Method::Seu, Method::Se, Method::Pe, Method::Lnpe];
        let llm = MockLlm::new(1).script("capital", vec!["Paris".into()]).script(
            "plus",
            vec!["four".into()],
        );
        let llm = llm.script("sky", vec!["blue".into()]);
        let client: Arc<dyn GenerationClient> = Arc::new(llm);
        cmd_generate(&cfg, &client).unwrap();
        let clients = build_clients(&cfg);
        let path = cmd_score(&cfg, &clients).unwrap();
        let rows = parse_scores_csv(&path).unwrap();
        for (id, method, value) in &rows {
            match method.as_str() {
                // M identical texts: zero dispersion, one cluster
                "seu" | "se" => assert!(value.abs() < 1e-9, "{id}/{method} = {value}"),
                // single-token responses: pe == lnpe
                "pe" | "lnpe" => {}
                other => panic!("unexpected method {other}"),
            }
        }
        let pe: Vec<f64> = rows
            .iter()
            .filter(|r| r.1 == "pe")
            .map(|r| r.2)
            .collect();
        let ln: Vec<f64> = rows
            .iter()
            .filter(|r| r.1 == "lnpe")
            .map(|r| r.2)
            .collect();
        assert_eq!(pe, ln, "one-token responses must make pe == lnpe");
    }

    #[test]
    fn evaluate_emits_report_with_youden_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        // craft scripted answers so q1/q2 are right and q3 is wrong
        cfg.methods = vec![Method::Pe, Method::Seu];
        let llm = MockLlm::new(1)
            .script("capital", vec!["Paris".into(), "It is Paris".into()])
            .script("plus", vec!["four".into()])
            .script("sky", vec!["probably green".into(), "no idea at all".into()]);
        let client: Arc<dyn GenerationClient> = Arc::new(llm);
        cmd_generate(&cfg, &client).unwrap();
        let clients = build_clients(&cfg);
        cmd_score(&cfg, &clients).unwrap();
        let report = cmd_evaluate(&cfg).unwrap();
        let text = std::fs::read_to_string(report).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("method,dataset,model,auroc,fpr_at_j,tpr_at_j,n")
        );
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), 2);
        assert!(body[0].starts_with("pe,qa,mock-model,"));
        assert!(body[1].starts_with("seu,qa,mock-model,"));
        assert!(cfg.out_dir.join("roc_pe.svg").exists());
        assert!(cfg.out_dir.join("roc_seu.svg").exists());
    }

    #[test]
    fn evaluate_rejects_degenerate_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.methods = vec![Method::Pe];
        // every record answered correctly -> all labels true
        let llm = MockLlm::new(1)
            .script("capital", vec!["Paris".into()])
            .script("plus", vec!["four".into()])
            .script("sky", vec!["blue".into()]);
        let client: Arc<dyn GenerationClient> = Arc::new(llm);
        cmd_generate(&cfg, &client).unwrap();
        let clients = build_clients(&cfg);
        cmd_score(&cfg, &clients).unwrap();
        assert!(matches!(
            cmd_evaluate(&cfg),
            Err(RunError::Eval(crate::evaluation::EvalError::DegenerateLabels { .. }))
        ));
    }

    #[test]
    fn aseu_train_then_score_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.aseu.train.epochs = 30;
        cfg.aseu.corpus_size = 16;
        let ckpt = cmd_aseu_train(&cfg).unwrap();
        assert!(ckpt.exists());
        let trace = std::fs::read_to_string(cfg.out_dir.join("loss_trace.csv")).unwrap();
        assert!(trace.starts_with("epoch,elbo,kl,recon,next_token_nll\n"));
        let a = std::fs::read(cmd_aseu_score(&cfg).unwrap()).unwrap();
        let b = std::fs::read(cmd_aseu_score(&cfg).unwrap()).unwrap();
        assert_eq!(a, b, "aseu_scores.csv must be byte-identical per seed");
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("record_id,method,value\n"));
        assert!(text.contains("prompt_ambiguous,aseu,"));
        assert!(text.contains("prompt_deterministic,aseu,"));
    }

    #[test]
    fn exit_codes_distinguish_config_errors() {
        assert_eq!(RunError::Config("x".into()).exit_code(), 2);
        assert_eq!(RunError::MissingCache("q".into()).exit_code(), 1);
    }
}
