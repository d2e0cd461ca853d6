//! Desk-scale amortised semantic uncertainty: a small recurrent sequence
//! model with a variational semantic head, trained to reconstruct a
//! reference sequence embedding, scored in a single pass by sampling the
//! latent posterior at every generation step.

mod grammar;
mod net;
mod score;
mod train;

pub use grammar::{
    grammar_vocab_size, GrammarExample, PromptKind, SyntheticGrammar, EOS, PROMPT_AMBIGUOUS,
    PROMPT_DETERMINISTIC,
};
pub use net::{
    context_posterior, elbo_backward, elbo_loss, elbo_loss_with_eps, LossParts, ModelParams,
    ParamGroup,
};
pub use score::{posterior_entropy_score, score_sequence, step_similarity, ScoreTrace};
pub use train::{
    load_checkpoint, save_checkpoint, train, write_loss_trace, EpochStats, Optimizer,
    TrainOptions,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AseuError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence must be non-empty")]
    EmptySequence,
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("model generated zero tokens before end-of-sequence")]
    ZeroLengthGeneration,
    #[error("latent geometry error: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Model dimensions and fixed hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub layers: usize,
    /// Observation variance of the embedding likelihood (fixed, not learned).
    pub sigma_e2: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// End-of-sequence token id used by greedy decoding.
    #[serde(default)]
    pub eos_token: usize,
}

impl ToyLmConfig {
    /// Model shape used by the bundled directional experiment: a hidden
    /// state wide enough to keep the two ambiguous branches from sharing
    /// a representation, a latent space with room for unused prior
    /// dimensions, and a conservative Adam learning rate. Pair with
    /// [`TrainOptions::recommended`].
    pub fn recommended(seed: u64) -> Self {
        Self {
            vocab_size: grammar_vocab_size(),
            hidden_dim: 32,
            latent_dim: 8,
            layers: 1,
            sigma_e2: 0.1,
            learning_rate: 1e-3,
            seed,
            eos_token: EOS,
        }
    }

    pub fn validate(&self) -> Result<(), AseuError> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("layers", self.layers),
        ] {
            if v < 1 {
                return Err(AseuError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.sigma_e2 > 0.0) {
            return Err(AseuError::InvalidConfig("sigma_e2 must be > 0".into()));
        }
        if self.eos_token >= self.vocab_size {
            return Err(AseuError::InvalidConfig(
                "eos_token must be < vocab_size".into(),
            ));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior q(z|x). `log_var` is already clamped to
/// [-10, 10] by the variational head so variances stay strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Range the variational head clamps log-variances to.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Closed-form KL(q || N(0, I)):
/// 0.5 * sum_d (exp(log_var_d) + mu_d^2 - 1 - log_var_d).
pub fn gaussian_kl(q: &LatentPosterior) -> f64 {
    q.mu.iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Log-density of e under N(decoded, sigma_e2 * I) where `decoded` is the
/// decoder output for a latent sample:
/// -||e - decoded||^2 / (2 sigma_e2) - (D/2) ln(2 pi sigma_e2).
pub fn recon_loglik(e: &[f64], decoded: &[f64], sigma_e2: f64) -> f64 {
    debug_assert_eq!(e.len(), decoded.len());
    let d = e.len() as f64;
    let sq: f64 = e
        .iter()
        .zip(decoded)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    -sq / (2.0 * sigma_e2) - 0.5 * d * (2.0 * std::f64::consts::PI * sigma_e2).ln()
}

/// Sampling and normalization knobs for test-time scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    /// Posterior samples per generation step (>= 2).
    pub k_samples: usize,
    pub length_norm: LengthNorm,
    pub seed: u64,
    /// Generation cap for greedy decoding.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    32
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            k_samples: 10,
            length_norm: LengthNorm::DivideByLength,
            seed: 0,
            max_steps: default_max_steps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    None,
    DivideByLength,
    DivideByLogLength,
}

/// Deterministic stand-in for an external embedding model: a hashed
/// bag-of-tokens projection onto the unit sphere in R^D.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    seed: u64,
    dim: usize,
}

impl ReferenceEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 1);
        Self { seed, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_tokens(&self, tokens: &[usize]) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut acc = vec![0.0f64; self.dim];
        for &token in tokens {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(token.to_le_bytes());
            let digest = hasher.finalize();
            let token_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(token_seed);
            for a in acc.iter_mut() {
                *a += rng.gen_range(-1.0..1.0);
            }
        }
        let norm: f64 = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            acc.iter_mut().for_each(|x| *x /= norm);
        } else {
            acc[0] = 1.0;
        }
        acc
    }
}
