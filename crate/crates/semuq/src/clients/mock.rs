//! Seeded deterministic fakes: a scripted-table LLM with paraphrase noise,
//! a hashed bag-of-tokens embedder, and a rule-based entailment judge.
//! Equal seeds give byte-identical outputs regardless of call order.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ClientError, EmbeddingClient, EntailmentClient, GenerationClient};
use crate::dataset::{GenerationSet, Response, SamplingConfig};
use crate::entropy::EntailmentLabel;
use crate::geometry::EmbeddingVector;

fn stable_hash(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic fake LLM. Answers come from a scripted table keyed by a
/// substring of the prompt; unscripted prompts get a hash-derived answer.
/// Paraphrase noise optionally appends filler tokens to some samples.
pub struct MockLlm {
    seed: u64,
    scripted: Vec<(String, Vec<String>)>,
    paraphrase_noise: bool,
}

impl MockLlm {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scripted: Vec::new(),
            paraphrase_noise: false,
        }
    }

    /// Register answers for any prompt containing `needle`. Samples cycle
    /// through the provided answers.
    pub fn script(mut self, needle: impl Into<String>, answers: Vec<String>) -> Self {
        self.scripted.push((needle.into(), answers));
        self
    }

    pub fn with_paraphrase_noise(mut self, enabled: bool) -> Self {
        self.paraphrase_noise = enabled;
        self
    }

    fn base_answers(&self, prompt: &str, m: usize) -> Vec<String> {
        for (needle, answers) in &self.scripted {
            if prompt.contains(needle.as_str()) {
                return (0..m).map(|i| answers[i % answers.len()].clone()).collect();
            }
        }
        let h = stable_hash(&[prompt]) % 100_000;
        (0..m).map(|_| format!("mock answer {h}")).collect()
    }
}

const FILLERS: [&str; 4] = ["indeed", "certainly", "overall", "notably"];

impl GenerationClient for MockLlm {
    fn generate(&self, prompt: &str, sampling: &SamplingConfig) -> Result<GenerationSet, ClientError> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(&[prompt, &sampling.model_id]));
        let mut responses = Vec::with_capacity(sampling.m);
        for mut text in self.base_answers(prompt, sampling.m) {
            if self.paraphrase_noise && rng.gen_bool(0.5) {
                let filler = FILLERS[rng.gen_range(0..FILLERS.len())];
                text = format!("{text} {filler}");
            }
            let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            let token_logprobs: Vec<f64> =
                tokens.iter().map(|_| -rng.gen_range(0.05..2.0)).collect();
            responses.push(Response {
                text,
                tokens,
                token_logprobs,
            });
        }
        let set = GenerationSet {
            record_id: String::new(),
            responses,
            sampling: sampling.clone(),
        };
        set.validate()?;
        Ok(set)
    }
}

/// Maps text to a unit vector via a hashed bag-of-tokens projection:
/// each token hashes to a fixed pseudo-random direction, token directions
/// are summed and the result normalised. Texts sharing most tokens land
/// close together.
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2);
        Self {
            seed,
            dim,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return v.clone();
        }
        let mut acc = vec![0.0f64; self.dim];
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        for token in &tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(&[token]));
            for a in acc.iter_mut() {
                // sum of uniforms is close enough to gaussian for directions
                *a += rng.gen_range(-1.0..1.0);
            }
        }
        if tokens.is_empty() {
            // empty text still needs a valid direction
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for a in acc.iter_mut() {
                *a = rng.gen_range(-1.0..1.0);
            }
        }
        let norm: f64 = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = if norm > 1e-12 {
            acc.iter().map(|x| x / norm).collect()
        } else {
            let mut unit = vec![0.0; self.dim];
            unit[0] = 1.0;
            unit
        };
        self.cache.lock().unwrap().insert(text.to_string(), v.clone());
        v
    }
}

impl EmbeddingClient for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        texts
            .iter()
            .map(|t| EmbeddingVector::new(self.embed_one(t)).map_err(ClientError::from))
            .collect()
    }
}

/// Rule-based entailment judge. Exact (premise, hypothesis) rules are
/// checked first; identical texts entail each other; everything else gets
/// the default label (neutral unless overridden).
pub struct MockEntailer {
    rules: HashMap<(String, String), EntailmentLabel>,
    default: EntailmentLabel,
}

impl MockEntailer {
    pub fn new() -> Self {
        Self {
            rules: HashMap::new(),
            default: EntailmentLabel::Neutral,
        }
    }

    pub fn with_default(mut self, label: EntailmentLabel) -> Self {
        self.default = label;
        self
    }

    pub fn rule(
        mut self,
        premise: impl Into<String>,
        hypothesis: impl Into<String>,
        label: EntailmentLabel,
    ) -> Self {
        self.rules.insert((premise.into(), hypothesis.into()), label);
        self
    }

    /// Add entailment in both directions for a pair.
    pub fn equivalent(self, a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        self.rule(a.clone(), b.clone(), EntailmentLabel::Entailment)
            .rule(b, a, EntailmentLabel::Entailment)
    }
}

impl Default for MockEntailer {
    fn default() -> Self {
        Self::new()
    }
}

impl EntailmentClient for MockEntailer {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentLabel, ClientError> {
        if let Some(l) = self
            .rules
            .get(&(premise.to_string(), hypothesis.to_string()))
        {
            return Ok(*l);
        }
        if premise == hypothesis {
            return Ok(EntailmentLabel::Entailment);
        }
        Ok(self.default)
    }
}

/// Entailment oracle over answer texts that ignores the question framing,
/// for wiring a [`MockEntailer`] directly into clustering in tests and
/// mock pipelines.
pub struct MockOracle {
    pub entailer: MockEntailer,
}

impl crate::entropy::EntailmentOracle for MockOracle {
    fn judge(
        &self,
        premise: &str,
        hypothesis: &str,
        _question_context: &str,
    ) -> Result<EntailmentLabel, String> {
        self.entailer
            .judge(premise, hypothesis)
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;

    fn sampling(m: usize) -> SamplingConfig {
        SamplingConfig {
            m,
            temperature: 0.5,
            prompt_template: "{question}".into(),
            model_id: "mock".into(),
            max_tokens: 16,
        }
    }

    #[test]
    fn mock_llm_scripted_answers() {
        let llm = MockLlm::new(7).script("France", vec!["Paris".into()]);
        let set = llm.generate("capital of France?", &sampling(5)).unwrap();
        assert_eq!(set.responses.len(), 5);
        assert!(set.responses.iter().all(|r| r.text == "Paris"));
    }

    #[test]
    fn mock_llm_equal_seeds_equal_outputs() {
        let a = MockLlm::new(7).with_paraphrase_noise(true);
        let b = MockLlm::new(7).with_paraphrase_noise(true);
        let s = sampling(5);
        assert_eq!(
            a.generate("some question", &s).unwrap(),
            b.generate("some question", &s).unwrap()
        );
        let c = MockLlm::new(8).with_paraphrase_noise(true);
        assert_ne!(
            a.generate("some question", &s).unwrap(),
            c.generate("some question", &s).unwrap()
        );
    }

    #[test]
    fn mock_llm_determinism_is_call_order_independent() {
        let a = MockLlm::new(7).with_paraphrase_noise(true);
        let s = sampling(3);
        let first = a.generate("q1", &s).unwrap();
        a.generate("q2", &s).unwrap();
        let again = a.generate("q1", &s).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn mock_embedder_identical_texts_cosine_one() {
        let emb = MockEmbedder::new(3, 16);
        let vs = emb
            .embed(&["hello world".to_string(), "hello world".to_string()])
            .unwrap();
        assert!((geometry::cosine(&vs[0], &vs[1]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mock_embedder_shared_tokens_are_closer_than_disjoint() {
        let emb = MockEmbedder::new(3, 32);
        let vs = emb
            .embed(&[
                "the capital of france is paris".to_string(),
                "the capital of france is paris indeed".to_string(),
                "purple elephants dance wildly tonight".to_string(),
            ])
            .unwrap();
        let near = geometry::cosine(&vs[0], &vs[1]).unwrap();
        let far = geometry::cosine(&vs[0], &vs[2]).unwrap();
        assert!(near > far);
        assert!(near > 0.85, "paraphrase cosine was {near}");
    }

    #[test]
    fn mock_entailer_rules_and_reflexivity() {
        let ent = MockEntailer::new().rule("a", "b", EntailmentLabel::Entailment);
        assert_eq!(ent.judge("a", "b").unwrap(), EntailmentLabel::Entailment);
        assert_eq!(ent.judge("b", "a").unwrap(), EntailmentLabel::Neutral);
        assert_eq!(ent.judge("x", "x").unwrap(), EntailmentLabel::Entailment);
    }
}
