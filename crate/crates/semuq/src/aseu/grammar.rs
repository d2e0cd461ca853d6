//! Two-prompt synthetic grammar used for the directional experiment.
//!
//! Prompt token 1 ("deterministic") is always answered by token 5. Prompt
//! token 2 ("ambiguous") is answered by token 8 or token 9 with equal
//! frequency; the two answers have unrelated reference embeddings. Every
//! sequence ends with the end-of-sequence token 0, and both prompts have
//! the same answer length, so length normalization affects them equally.
//!
//! The reference target is the embedding of the answer (the response),
//! not of the whole sequence: the prompt carries no semantic content of
//! its own. A model trained on this corpus should report higher semantic
//! uncertainty after prompt 2 than after prompt 1.

use super::ReferenceEmbedder;

/// Tokens 0..12: 0 = eos, 1..=2 prompts, 3..=11 continuation tokens.
pub fn grammar_vocab_size() -> usize {
    12
}

pub const EOS: usize = 0;
pub const PROMPT_DETERMINISTIC: usize = 1;
pub const PROMPT_AMBIGUOUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Deterministic,
    Ambiguous,
}

impl PromptKind {
    pub fn prompt_token(self) -> usize {
        match self {
            PromptKind::Deterministic => PROMPT_DETERMINISTIC,
            PromptKind::Ambiguous => PROMPT_AMBIGUOUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarExample {
    pub kind: PromptKind,
    /// Full sequence: prompt token, continuation, eos.
    pub tokens: Vec<usize>,
    /// Reference embedding of the continuation (prompt and eos excluded).
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    seed: u64,
    embedder: ReferenceEmbedder,
}

impl SyntheticGrammar {
    /// The three answers must embed in clearly different directions or the
    /// grammar would not be "semantically ambiguous" in any measurable
    /// sense, so the embedder seed is chosen (deterministically from
    /// `seed`) such that all pairwise answer cosines stay below this bound.
    const MAX_ANSWER_COSINE: f64 = 0.25;

    pub fn new(seed: u64, embed_dim: usize) -> Self {
        let base = seed ^ 0x5eed_e44b;
        let answers: Vec<Vec<usize>> = [PromptKind::Deterministic, PromptKind::Ambiguous]
            .into_iter()
            .flat_map(Self::continuations)
            .map(|seq| seq[1..seq.len() - 1].to_vec())
            .collect();
        let embedder = (0..u64::MAX)
            .map(|k| ReferenceEmbedder::new(base.wrapping_add(k), embed_dim))
            .find(|embedder| {
                let es: Vec<Vec<f64>> = answers.iter().map(|a| embedder.embed_tokens(a)).collect();
                es.iter().enumerate().all(|(i, a)| {
                    es[..i].iter().all(|b| {
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        dot.abs() < Self::MAX_ANSWER_COSINE
                    })
                })
            })
            .expect("some embedder seed separates the answers");
        Self { seed, embedder }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedder(&self) -> &ReferenceEmbedder {
        &self.embedder
    }

    /// The possible full sequences for a prompt kind.
    pub fn continuations(kind: PromptKind) -> Vec<Vec<usize>> {
        match kind {
            PromptKind::Deterministic => vec![vec![PROMPT_DETERMINISTIC, 5, EOS]],
            PromptKind::Ambiguous => vec![
                vec![PROMPT_AMBIGUOUS, 8, EOS],
                vec![PROMPT_AMBIGUOUS, 9, EOS],
            ],
        }
    }

    fn example(&self, kind: PromptKind, branch: usize) -> GrammarExample {
        let options = Self::continuations(kind);
        let tokens = options[branch % options.len()].clone();
        // embed the response only: strip the prompt token and the eos
        let target = self.embedder.embed_tokens(&tokens[1..tokens.len() - 1]);
        GrammarExample {
            kind,
            tokens,
            target,
        }
    }

    /// A corpus of `n` examples, uniform over the three distinct sequences
    /// of the grammar (the deterministic continuation and both ambiguous
    /// branches), so each branch is as frequent as the deterministic
    /// answer and neither prompt dominates the embedding distribution.
    pub fn corpus(&self, n: usize) -> Vec<GrammarExample> {
        (0..n)
            .map(|i| match i % 3 {
                0 => self.example(PromptKind::Deterministic, 0),
                r => self.example(PromptKind::Ambiguous, r - 1),
            })
            .collect()
    }
}
