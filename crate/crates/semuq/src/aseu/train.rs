//! Plain SGD training loop over analytic gradients, plus checkpoint
//! serialization and the per-epoch loss trace.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::net::{elbo_backward, ModelParams};
use super::{AseuError, ToyLmConfig};

/// First-order update rule for the training loop. Both are deterministic
/// given the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

/// Knobs for one training run. Defaults: 300 epochs, 1 Monte-Carlo sample,
/// next-token term at weight 1, gradient norm clipped at 5, plain SGD,
/// no KL warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub mc_samples: usize,
    /// Weight of the auxiliary next-token cross-entropy term.
    pub nll_weight: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Also train the variational head on every strict prefix of each
    /// sequence (target unchanged: the response embedding). Test-time
    /// scoring conditions on every prefix, so this removes the train/test
    /// conditioning mismatch entirely.
    pub prefix_training: bool,
    pub optimizer: Optimizer,
    /// Ramp the KL weight linearly from 0 to `kl_weight` over this many
    /// epochs (0 disables warmup). Counters posterior collapse early in
    /// training.
    pub kl_warmup_epochs: usize,
    /// Final weight of the KL term (beta-VAE style). Values below 1 let
    /// the posterior means spread further from the prior; the reported
    /// loss trace always carries the unweighted KL.
    pub kl_weight: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            mc_samples: 1,
            nll_weight: 1.0,
            grad_clip: 5.0,
            prefix_training: false,
            optimizer: Optimizer::Sgd,
            kl_warmup_epochs: 0,
            kl_weight: 1.0,
        }
    }
}

impl TrainOptions {
    /// Settings that reliably produce the intended uncertainty ordering on
    /// the bundled grammar (see the `directional_experiment` example):
    /// Adam over 2000 epochs, 8 Monte-Carlo samples to tame gradient noise
    /// in the reconstruction term, a 500-epoch KL warmup against early
    /// posterior collapse, and prefix training so scoring-time contexts
    /// are seen during training. Pair with [`ToyLmConfig::recommended`].
    ///
    /// [`ToyLmConfig::recommended`]: super::ToyLmConfig::recommended
    pub fn recommended() -> Self {
        Self {
            epochs: 2000,
            mc_samples: 8,
            prefix_training: true,
            optimizer: Optimizer::Adam,
            kl_warmup_epochs: 500,
            ..Self::default()
        }
    }
}

/// Per-parameter Adam state.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub next_token_nll: f64,
}

fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

/// Train on `corpus` (token sequence, reference embedding) pairs.
/// Deterministic given `config.seed`. Aborts with the epoch index if the
/// loss goes non-finite.
pub fn train(
    corpus: &[(Vec<usize>, Vec<f64>)],
    config: &ToyLmConfig,
    options: &TrainOptions,
) -> Result<(ModelParams, Vec<EpochStats>), AseuError> {
    if corpus.is_empty() {
        return Err(AseuError::InvalidConfig("corpus must be non-empty".into()));
    }
    let mut params = ModelParams::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7ea1));
    let d = config.latent_dim;
    let lr = config.learning_rate;
    let mut trace = Vec::with_capacity(options.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut adam = AdamState::new(params.num_params());
    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let ramp = if options.kl_warmup_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / options.kl_warmup_epochs as f64).min(1.0)
        };
        let kl_weight = ramp * options.kl_weight;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut passes = 0usize;
        for &idx in &order {
            let (tokens, target) = &corpus[idx];
            let mut cond_positions = vec![tokens.len() - 1];
            if options.prefix_training {
                cond_positions.extend(0..tokens.len() - 1);
            }
            for (pass, &cond_t) in cond_positions.iter().enumerate() {
                let eps: Vec<Vec<f64>> = (0..options.mc_samples.max(1))
                    .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                    .collect();
                // the auxiliary next-token term only needs one pass
                let nll_weight = if pass == 0 { options.nll_weight } else { 0.0 };
                let (parts, mut grad) =
                    elbo_backward(&params, tokens, target, &eps, cond_t, nll_weight, kl_weight)?;
                let loss = parts.elbo + nll_weight * parts.nll;
                if !loss.is_finite() {
                    return Err(AseuError::Diverged { epoch });
                }
                clip_gradient(&mut grad, options.grad_clip);
                match options.optimizer {
                    Optimizer::Sgd => {
                        for (p, g) in params.data.iter_mut().zip(&grad) {
                            *p -= lr * g;
                        }
                    }
                    Optimizer::Adam => adam.step(&mut params.data, &grad, lr),
                }
                sums.0 += parts.elbo;
                sums.1 += parts.kl;
                sums.2 += parts.recon;
                sums.3 += parts.nll;
                passes += 1;
            }
        }
        let n = passes as f64;
        trace.push(EpochStats {
            epoch,
            elbo: sums.0 / n,
            kl: sums.1 / n,
            recon: sums.2 / n,
            next_token_nll: sums.3 / n,
        });
    }
    Ok((params, trace))
}

/// Write the per-epoch trace as `loss_trace.csv`-style rows.
pub fn write_loss_trace(path: &Path, trace: &[EpochStats]) -> Result<(), AseuError> {
    let mut out = String::from("epoch,elbo,kl,recon,next_token_nll\n");
    for row in trace {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            row.epoch, row.elbo, row.kl, row.recon, row.next_token_nll
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: (usize, usize),
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ToyLmConfig,
    tensors: Vec<CheckpointTensor>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Serialize the config and every named tensor to a JSON file. The write
/// goes through a temporary file in the same directory, so a crash never
/// leaves a truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), AseuError> {
    let tensors = params
        .groups()
        .iter()
        .map(|g| CheckpointTensor {
            name: g.name.clone(),
            shape: g.shape,
            data: params.data[g.offset..g.offset + g.len()].to_vec(),
        })
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer(&mut tmp, &ckpt)
        .map_err(|e| AseuError::Checkpoint(format!("serialize: {e}")))?;
    tmp.persist(path)
        .map_err(|e| AseuError::Checkpoint(format!("persist: {e}")))?;
    Ok(())
}

/// Load a checkpoint, validating version and every tensor name and shape
/// against the layout implied by the stored config.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, AseuError> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| AseuError::Checkpoint(format!("parse: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(AseuError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    let reference = ModelParams::init(&ckpt.config)?;
    let expected = reference.groups();
    if ckpt.tensors.len() != expected.len() {
        return Err(AseuError::Checkpoint(format!(
            "checkpoint has {} tensors, config implies {}",
            ckpt.tensors.len(),
            expected.len()
        )));
    }
    let mut data = vec![0.0f64; reference.num_params()];
    for (tensor, group) in ckpt.tensors.iter().zip(expected) {
        if tensor.name != group.name {
            return Err(AseuError::Checkpoint(format!(
                "tensor '{}' out of order, expected '{}'",
                tensor.name, group.name
            )));
        }
        if tensor.shape != group.shape {
            return Err(AseuError::Checkpoint(format!(
                "tensor '{}' has shape {:?}, config implies {:?}",
                tensor.name, tensor.shape, group.shape
            )));
        }
        if tensor.data.len() != group.len() {
            return Err(AseuError::Checkpoint(format!(
                "tensor '{}' has {} entries, shape implies {}",
                tensor.name,
                tensor.data.len(),
                group.len()
            )));
        }
        data[group.offset..group.offset + group.len()].copy_from_slice(&tensor.data);
    }
    ModelParams::from_parts(&ckpt.config, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aseu::grammar::SyntheticGrammar;

    fn config(seed: u64) -> ToyLmConfig {
        ToyLmConfig {
            vocab_size: 12,
            hidden_dim: 16,
            latent_dim: 8,
            layers: 1,
            sigma_e2: 0.1,
            learning_rate: 0.05,
            seed,
            eos_token: 0,
        }
    }

    fn tiny_corpus() -> Vec<(Vec<usize>, Vec<f64>)> {
        let grammar = SyntheticGrammar::new(3, 8);
        grammar
            .corpus(8)
            .into_iter()
            .map(|ex| (ex.tokens, ex.target))
            .collect()
    }

    #[test]
    fn single_example_loss_decreases() {
        let corpus = vec![tiny_corpus().remove(0)];
        let opts = TrainOptions {
            epochs: 200,
            ..Default::default()
        };
        let (_, trace) = train(&corpus, &config(1), &opts).unwrap();
        let first = trace.first().unwrap();
        let last = trace.last().unwrap();
        assert!(
            last.elbo + last.next_token_nll < first.elbo + first.next_token_nll,
            "no improvement: {first:?} -> {last:?}"
        );
    }

    #[test]
    fn zero_learning_rate_keeps_trace_constant() {
        let mut cfg = config(1);
        cfg.learning_rate = 0.0;
        let opts = TrainOptions {
            epochs: 5,
            mc_samples: 1,
            ..Default::default()
        };
        let corpus = vec![tiny_corpus().remove(0)];
        let (_, trace) = train(&corpus, &cfg, &opts).unwrap();
        // single example, so shuffling cannot reorder anything; with the
        // params frozen only the eps draw varies, and kl/nll are eps-free
        for row in &trace {
            assert!((row.kl - trace[0].kl).abs() < 1e-12);
            assert!((row.next_token_nll - trace[0].next_token_nll).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let corpus = tiny_corpus();
        let opts = TrainOptions {
            epochs: 10,
            ..Default::default()
        };
        let (p1, t1) = train(&corpus, &config(4), &opts).unwrap();
        let (p2, t2) = train(&corpus, &config(4), &opts).unwrap();
        assert_eq!(p1.data, p2.data);
        assert_eq!(t1, t2);
        let (p3, _) = train(&corpus, &config(5), &opts).unwrap();
        assert_ne!(p1.data, p3.data);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            train(&[], &config(1), &TrainOptions::default()),
            Err(AseuError::InvalidConfig(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let corpus = tiny_corpus();
        let opts = TrainOptions {
            epochs: 3,
            ..Default::default()
        };
        let (params, _) = train(&corpus, &config(6), &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        assert_eq!(loaded.data, params.data);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let params = ModelParams::init(&config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &params).unwrap();
        // tamper: claim a different hidden_dim in the stored config
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("\"hidden_dim\":16", "\"hidden_dim\":8");
        std::fs::write(&path, tampered).unwrap();
        match load_checkpoint(&path) {
            Err(AseuError::Checkpoint(msg)) => {
                assert!(msg.contains("shape"), "unexpected message: {msg}")
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(AseuError::Checkpoint(_))
        ));
    }

    #[test]
    fn loss_trace_file_has_expected_header() {
        let trace = vec![EpochStats {
            epoch: 0,
            elbo: 1.5,
            kl: 0.5,
            recon: -1.0,
            next_token_nll: 2.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss_trace.csv");
        write_loss_trace(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,elbo,kl,recon,next_token_nll"));
        assert_eq!(lines.next(), Some("0,1.500000,0.500000,-1.000000,2.000000"));
    }
}
