//! The toy backbone and its analytic reverse pass. Parameters live in one
//! flat vector with a named layout so SGD updates, finite-difference
//! checks, and checkpointing all operate on the same storage.
//!
//! Backbone: a stack of tanh recurrent layers over a token embedding
//! table, with a softmax next-token head. The variational head maps a
//! hidden state to (mu, log_var); the decoder is a one-hidden-layer
//! tanh perceptron from latent samples to predicted embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{gaussian_kl, recon_loglik, AseuError, LatentPosterior, ToyLmConfig, LOG_VAR_CLAMP};

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    /// (rows, cols); cols == 1 for bias vectors.
    pub shape: (usize, usize),
    pub offset: usize,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout(cfg: &ToyLmConfig) -> Vec<ParamGroup> {
    let (v, h, d) = (cfg.vocab_size, cfg.hidden_dim, cfg.latent_dim);
    let mut groups = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        let g = ParamGroup {
            name,
            shape: (rows, cols),
            offset,
        };
        offset += rows * cols;
        g
    };
    groups.push(push("embed".into(), v, h));
    for l in 0..cfg.layers {
        groups.push(push(format!("w_in.{l}"), h, h));
        groups.push(push(format!("w_rec.{l}"), h, h));
        groups.push(push(format!("b.{l}"), h, 1));
    }
    groups.push(push("w_out".into(), v, h));
    groups.push(push("b_out".into(), v, 1));
    groups.push(push("w_mu".into(), d, h));
    groups.push(push("b_mu".into(), d, 1));
    groups.push(push("w_lv".into(), d, h));
    groups.push(push("b_lv".into(), d, 1));
    groups.push(push("w_dec1".into(), h, d));
    groups.push(push("b_dec1".into(), h, 1));
    groups.push(push("w_dec2".into(), d, h));
    groups.push(push("b_dec2".into(), d, 1));
    groups
}

/// All parameters (backbone theta, variational head psi, decoder omega)
/// in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ToyLmConfig,
    pub data: Vec<f64>,
    groups: Vec<ParamGroup>,
}

impl ModelParams {
    /// Random initialization, uniform scaled by 1/sqrt(fan_in), zero biases.
    /// The log-variance bias starts at -4 so early latent samples are
    /// dominated by the mean; a unit-variance start drowns the mean in
    /// noise, the decoder then ignores the latent, and the posterior never
    /// becomes informative (the usual collapse equilibrium).
    pub fn init(config: &ToyLmConfig) -> Result<Self, AseuError> {
        config.validate()?;
        let groups = layout(config);
        let total: usize = groups.iter().map(ParamGroup::len).sum();
        let mut data = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for g in &groups {
            if g.shape.1 == 1 {
                if g.name == "b_lv" {
                    data[g.offset..g.offset + g.len()].fill(-4.0);
                }
                continue; // other biases start at zero
            }
            let scale = 1.0 / (g.shape.1 as f64).sqrt();
            for value in &mut data[g.offset..g.offset + g.len()] {
                *value = rng.gen_range(-scale..scale);
            }
        }
        Ok(Self {
            config: config.clone(),
            data,
            groups,
        })
    }

    pub fn from_parts(config: &ToyLmConfig, data: Vec<f64>) -> Result<Self, AseuError> {
        config.validate()?;
        let groups = layout(config);
        let total: usize = groups.iter().map(ParamGroup::len).sum();
        if data.len() != total {
            return Err(AseuError::Checkpoint(format!(
                "parameter vector has {} entries, layout needs {total}",
                data.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            data,
            groups,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> &ParamGroup {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .unwrap_or_else(|| panic!("unknown parameter group '{name}'"))
    }

    fn slice(&self, name: &str) -> &[f64] {
        let g = self.group(name);
        &self.data[g.offset..g.offset + g.len()]
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), AseuError> {
        if tokens.is_empty() {
            return Err(AseuError::EmptySequence);
        }
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(AseuError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// out += W^T d, for W of shape rows x cols.
fn matvec_transpose_add(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let dr = d[r];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += dr * wv;
        }
    }
}

/// grad_w += d (outer) x, for W of shape rows x cols.
fn outer_add(grad_w: &mut [f64], rows: usize, cols: usize, d: &[f64], x: &[f64]) {
    debug_assert_eq!(d.len(), rows);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let dr = d[r];
        let row = &mut grad_w[r * cols..(r + 1) * cols];
        for (g, xv) in row.iter_mut().zip(x) {
            *g += dr * xv;
        }
    }
}

/// Hidden states for a full sequence: hs[t][l] is the layer-l state after
/// consuming token t.
pub(crate) struct HiddenStates {
    pub hs: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn run_backbone(params: &ModelParams, tokens: &[usize]) -> HiddenStates {
    let cfg = &params.config;
    let h = cfg.hidden_dim;
    let embed = params.slice("embed");
    let mut hs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(tokens.len());
    let mut scratch = vec![0.0f64; h];
    for (t, &token) in tokens.iter().enumerate() {
        let mut layer_states: Vec<Vec<f64>> = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let w_in = params.slice(&format!("w_in.{l}"));
            let w_rec = params.slice(&format!("w_rec.{l}"));
            let b = params.slice(&format!("b.{l}"));
            let input: &[f64] = if l == 0 {
                &embed[token * h..(token + 1) * h]
            } else {
                &layer_states[l - 1]
            };
            let mut pre = vec![0.0f64; h];
            matvec(w_in, h, h, input, &mut pre);
            if t > 0 {
                matvec(w_rec, h, h, &hs[t - 1][l], &mut scratch);
                for (p, s) in pre.iter_mut().zip(&scratch) {
                    *p += s;
                }
            }
            for (p, bv) in pre.iter_mut().zip(b) {
                *p = (*p + bv).tanh();
            }
            layer_states.push(pre);
        }
        hs.push(layer_states);
    }
    HiddenStates { hs }
}

/// The variational posterior conditioned on a token context: backbone over
/// `tokens`, head applied to the last hidden state. Useful for inspecting
/// what a trained model believes at a given prefix.
pub fn context_posterior(
    params: &ModelParams,
    tokens: &[usize],
) -> Result<LatentPosterior, AseuError> {
    if tokens.is_empty() {
        return Err(AseuError::EmptySequence);
    }
    for &t in tokens {
        if t >= params.config.vocab_size {
            return Err(AseuError::TokenOutOfRange {
                token: t,
                vocab: params.config.vocab_size,
            });
        }
    }
    let states = run_backbone(params, tokens);
    let (q, _) = posterior_at(params, &states.hs[tokens.len() - 1][params.config.layers - 1]);
    Ok(q)
}

/// Variational head applied to one hidden state. Returns the posterior
/// (log_var clamped) plus the raw pre-clamp log-variances for masking.
pub(crate) fn posterior_at(params: &ModelParams, hidden: &[f64]) -> (LatentPosterior, Vec<f64>) {
    let cfg = &params.config;
    let (d, h) = (cfg.latent_dim, cfg.hidden_dim);
    let mut mu = vec![0.0; d];
    let mut lv_raw = vec![0.0; d];
    matvec(params.slice("w_mu"), d, h, hidden, &mut mu);
    matvec(params.slice("w_lv"), d, h, hidden, &mut lv_raw);
    for (m, b) in mu.iter_mut().zip(params.slice("b_mu")) {
        *m += b;
    }
    for (l, b) in lv_raw.iter_mut().zip(params.slice("b_lv")) {
        *l += b;
    }
    let log_var = lv_raw
        .iter()
        .map(|&l| l.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
        .collect();
    (LatentPosterior { mu, log_var }, lv_raw)
}

/// Decoder forward: z -> tanh hidden -> predicted embedding.
pub(crate) fn decode(params: &ModelParams, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let (d, h) = (cfg.latent_dim, cfg.hidden_dim);
    let mut a = vec![0.0; h];
    matvec(params.slice("w_dec1"), h, d, z, &mut a);
    for (av, b) in a.iter_mut().zip(params.slice("b_dec1")) {
        *av = (*av + b).tanh();
    }
    let mut out = vec![0.0; d];
    matvec(params.slice("w_dec2"), d, h, &a, &mut out);
    for (ov, b) in out.iter_mut().zip(params.slice("b_dec2")) {
        *ov += b;
    }
    (a, out)
}

/// Next-token logits from a top-layer hidden state.
pub(crate) fn logits_at(params: &ModelParams, hidden: &[f64]) -> Vec<f64> {
    let cfg = &params.config;
    let (v, h) = (cfg.vocab_size, cfg.hidden_dim);
    let mut logits = vec![0.0; v];
    matvec(params.slice("w_out"), v, h, hidden, &mut logits);
    for (lg, b) in logits.iter_mut().zip(params.slice("b_out")) {
        *lg += b;
    }
    logits
}

/// Per-example loss components. `elbo` = kl - recon (the negative bound);
/// `nll` is the mean next-token cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub nll: f64,
}

/// Negative ELBO with explicit reparameterization noise: runs the backbone
/// over the full sequence, conditions q on the hidden state at `cond_t`
/// (usually the final token), and averages the reconstruction
/// log-likelihood over the provided eps samples.
pub fn elbo_loss_with_eps(
    params: &ModelParams,
    tokens: &[usize],
    e_target: &[f64],
    eps_samples: &[Vec<f64>],
    cond_t: usize,
) -> Result<f64, AseuError> {
    params.check_tokens(tokens)?;
    let states = run_backbone(params, tokens);
    let (q, _) = posterior_at(params, &states.hs[cond_t][params.config.layers - 1]);
    let kl = gaussian_kl(&q);
    let mut recon = 0.0;
    for eps in eps_samples {
        let z: Vec<f64> = q
            .mu
            .iter()
            .zip(&q.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
            .collect();
        let (_, decoded) = decode(params, &z);
        recon += recon_loglik(e_target, &decoded, params.config.sigma_e2);
    }
    recon /= eps_samples.len() as f64;
    Ok(kl - recon)
}

/// Negative ELBO with freshly drawn reparameterization noise.
pub fn elbo_loss(
    params: &ModelParams,
    tokens: &[usize],
    e_target: &[f64],
    mc_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64, AseuError> {
    let d = params.config.latent_dim;
    let eps: Vec<Vec<f64>> = (0..mc_samples.max(1))
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    elbo_loss_with_eps(params, tokens, e_target, &eps, tokens.len() - 1)
}

/// Analytic gradients of kl_weight * KL - recon + nll_weight * next-token
/// NLL with respect to every parameter. `kl_weight` < 1 implements KL
/// warmup; the reported LossParts always carry the unweighted terms.
/// Returns the loss parts and the flat gradient.
pub fn elbo_backward(
    params: &ModelParams,
    tokens: &[usize],
    e_target: &[f64],
    eps_samples: &[Vec<f64>],
    cond_t: usize,
    nll_weight: f64,
    kl_weight: f64,
) -> Result<(LossParts, Vec<f64>), AseuError> {
    params.check_tokens(tokens)?;
    let cfg = &params.config;
    let (v, h, d, layers) = (cfg.vocab_size, cfg.hidden_dim, cfg.latent_dim, cfg.layers);
    let t_len = tokens.len();
    let states = run_backbone(params, tokens);
    let mut grad = vec![0.0f64; params.num_params()];
    // dL/dh accumulators, same shape as hidden states
    let mut dh: Vec<Vec<Vec<f64>>> = (0..t_len)
        .map(|_| (0..layers).map(|_| vec![0.0f64; h]).collect())
        .collect();

    // --- next-token NLL over positions 0..T-2 ---
    let mut nll = 0.0;
    let predictions = t_len.saturating_sub(1);
    if predictions > 0 && nll_weight != 0.0 {
        let w_out = params.slice("w_out").to_vec();
        let b_out = params.slice("b_out").to_vec();
        let g_out = params.group("w_out").offset;
        let g_bout = params.group("b_out").offset;
        let scale = nll_weight / predictions as f64;
        for t in 0..predictions {
            let hidden = &states.hs[t][layers - 1];
            let mut logits = vec![0.0; v];
            matvec(&w_out, v, h, hidden, &mut logits);
            for (lg, b) in logits.iter_mut().zip(&b_out) {
                *lg += b;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let next = tokens[t + 1];
            nll += -(logits[next] - max - z.ln()) / predictions as f64;
            // dlogits = (softmax - onehot) * scale
            let mut dlogits: Vec<f64> = exps.iter().map(|e| e / z * scale).collect();
            dlogits[next] -= scale;
            outer_add(&mut grad[g_out..g_out + v * h], v, h, &dlogits, hidden);
            for (g, dl) in grad[g_bout..g_bout + v].iter_mut().zip(&dlogits) {
                *g += dl;
            }
            matvec_transpose_add(&w_out, v, h, &dlogits, &mut dh[t][layers - 1]);
        }
    } else if predictions > 0 {
        // still report the NLL value even when its gradient is off
        let w_out = params.slice("w_out");
        let b_out = params.slice("b_out");
        for t in 0..predictions {
            let hidden = &states.hs[t][layers - 1];
            let mut logits = vec![0.0; v];
            matvec(w_out, v, h, hidden, &mut logits);
            for (lg, b) in logits.iter_mut().zip(b_out) {
                *lg += b;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            nll += -(logits[tokens[t + 1]] - max - z.ln()) / predictions as f64;
        }
    }

    // --- ELBO head at cond_t ---
    let cond_hidden = states.hs[cond_t][layers - 1].clone();
    let (q, lv_raw) = posterior_at(params, &cond_hidden);
    let kl = gaussian_kl(&q);
    let clamp_mask: Vec<f64> = lv_raw
        .iter()
        .map(|&l| if l.abs() < LOG_VAR_CLAMP { 1.0 } else { 0.0 })
        .collect();

    // KL gradients
    let mut dmu: Vec<f64> = q.mu.iter().map(|&m| kl_weight * m).collect();
    let mut dlv: Vec<f64> = q
        .log_var
        .iter()
        .map(|&lv| kl_weight * 0.5 * (lv.exp() - 1.0))
        .collect();

    // reconstruction gradients, averaged over eps samples
    let n_samples = eps_samples.len() as f64;
    let sigma2 = cfg.sigma_e2;
    let mut recon = 0.0;
    let g_dec1 = params.group("w_dec1").offset;
    let g_bdec1 = params.group("b_dec1").offset;
    let g_dec2 = params.group("w_dec2").offset;
    let g_bdec2 = params.group("b_dec2").offset;
    let w_dec1 = params.slice("w_dec1").to_vec();
    let w_dec2 = params.slice("w_dec2").to_vec();
    for eps in eps_samples {
        let z: Vec<f64> = q
            .mu
            .iter()
            .zip(&q.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
            .collect();
        let (a, decoded) = decode(params, &z);
        recon += recon_loglik(e_target, &decoded, sigma2) / n_samples;
        // d(loss)/d decoded for loss term -mean(recon)
        let ddec: Vec<f64> = decoded
            .iter()
            .zip(e_target)
            .map(|(p, t)| (p - t) / (sigma2 * n_samples))
            .collect();
        outer_add(&mut grad[g_dec2..g_dec2 + d * h], d, h, &ddec, &a);
        for (g, dd) in grad[g_bdec2..g_bdec2 + d].iter_mut().zip(&ddec) {
            *g += dd;
        }
        let mut da = vec![0.0; h];
        matvec_transpose_add(&w_dec2, d, h, &ddec, &mut da);
        let du: Vec<f64> = da.iter().zip(&a).map(|(dv, av)| dv * (1.0 - av * av)).collect();
        outer_add(&mut grad[g_dec1..g_dec1 + h * d], h, d, &du, &z);
        for (g, dv) in grad[g_bdec1..g_bdec1 + h].iter_mut().zip(&du) {
            *g += dv;
        }
        let mut dz = vec![0.0; d];
        matvec_transpose_add(&w_dec1, h, d, &du, &mut dz);
        for i in 0..d {
            dmu[i] += dz[i];
            dlv[i] += dz[i] * eps[i] * 0.5 * (q.log_var[i] / 2.0).exp() * clamp_mask[i];
        }
    }
    // the clamp zeroes all log-var gradients (KL included) outside +-10
    let dlv: Vec<f64> = dlv
        .iter()
        .zip(&clamp_mask)
        .map(|(dv, mask)| dv * mask)
        .collect();

    // variational head parameter grads + contribution to cond hidden
    let g_wmu = params.group("w_mu").offset;
    let g_bmu = params.group("b_mu").offset;
    let g_wlv = params.group("w_lv").offset;
    let g_blv = params.group("b_lv").offset;
    outer_add(&mut grad[g_wmu..g_wmu + d * h], d, h, &dmu, &cond_hidden);
    for (g, dv) in grad[g_bmu..g_bmu + d].iter_mut().zip(&dmu) {
        *g += dv;
    }
    outer_add(&mut grad[g_wlv..g_wlv + d * h], d, h, &dlv, &cond_hidden);
    for (g, dv) in grad[g_blv..g_blv + d].iter_mut().zip(&dlv) {
        *g += dv;
    }
    matvec_transpose_add(params.slice("w_mu"), d, h, &dmu, &mut dh[cond_t][layers - 1]);
    matvec_transpose_add(params.slice("w_lv"), d, h, &dlv, &mut dh[cond_t][layers - 1]);

    // --- BPTT through the recurrent stack ---
    let embed_offset = params.group("embed").offset;
    for t in (0..t_len).rev() {
        for l in (0..layers).rev() {
            let h_state = &states.hs[t][l];
            let du: Vec<f64> = dh[t][l]
                .iter()
                .zip(h_state)
                .map(|(dv, hv)| dv * (1.0 - hv * hv))
                .collect();
            let w_in_group = params.group(&format!("w_in.{l}"));
            let w_rec_group = params.group(&format!("w_rec.{l}"));
            let b_group = params.group(&format!("b.{l}"));
            let input_owned: Vec<f64>;
            let input: &[f64] = if l == 0 {
                let token = tokens[t];
                input_owned = params.slice("embed")[token * h..(token + 1) * h].to_vec();
                &input_owned
            } else {
                &states.hs[t][l - 1]
            };
            outer_add(
                &mut grad[w_in_group.offset..w_in_group.offset + h * h],
                h,
                h,
                &du,
                input,
            );
            if t > 0 {
                outer_add(
                    &mut grad[w_rec_group.offset..w_rec_group.offset + h * h],
                    h,
                    h,
                    &du,
                    &states.hs[t - 1][l],
                );
            }
            for (g, dv) in grad[b_group.offset..b_group.offset + h].iter_mut().zip(&du) {
                *g += dv;
            }
            if t > 0 {
                let w_rec = params.slice(&format!("w_rec.{l}")).to_vec();
                matvec_transpose_add(&w_rec, h, h, &du, &mut dh[t - 1][l]);
            }
            let w_in = params.slice(&format!("w_in.{l}")).to_vec();
            if l > 0 {
                // split borrow: dh[t][l-1] from dh[t][l] handled by index math
                let mut dinput = vec![0.0; h];
                matvec_transpose_add(&w_in, h, h, &du, &mut dinput);
                for (o, dv) in dh[t][l - 1].iter_mut().zip(&dinput) {
                    *o += dv;
                }
            } else {
                let token = tokens[t];
                let row = &mut grad[embed_offset + token * h..embed_offset + (token + 1) * h];
                let mut dinput = vec![0.0; h];
                matvec_transpose_add(&w_in, h, h, &du, &mut dinput);
                for (g, dv) in row.iter_mut().zip(&dinput) {
                    *g += dv;
                }
            }
        }
    }

    let parts = LossParts {
        elbo: kl - recon,
        kl,
        recon,
        nll,
    };
    Ok((parts, grad))
}
