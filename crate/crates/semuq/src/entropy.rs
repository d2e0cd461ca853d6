//! Semantic entropy over bidirectional-entailment clusters, plus the two
//! token-likelihood baselines (predictive entropy and its length-normalised
//! variant).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GenerationSet, Response};

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("entailment oracle failed on premise '{premise}' / hypothesis '{hypothesis}': {reason}")]
    OracleFailure {
        premise: String,
        hypothesis: String,
        reason: String,
    },
    #[error("cluster index {index} out of range for {len} responses")]
    BadClusterIndex { index: usize, len: usize },
    #[error("clustering contains an empty cluster")]
    EmptyCluster,
    #[error("response {index} has no tokens")]
    EmptyTokenList { index: usize },
    #[error("invalid cluster distribution: {0}")]
    BadDistribution(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntailmentLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl EntailmentLabel {
    /// Parse a backend label string, case-insensitively.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Some(Self::Entailment),
            "neutral" => Some(Self::Neutral),
            "contradiction" => Some(Self::Contradiction),
            _ => None,
        }
    }
}

/// Any backend that labels ordered text pairs. The question is passed so
/// implementations can prepend it for context ("Question: ... Answer: ...").
pub trait EntailmentOracle {
    fn judge(
        &self,
        premise: &str,
        hypothesis: &str,
        question_context: &str,
    ) -> Result<EntailmentLabel, String>;
}

/// Equivalence classes over response indices 0..M-1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClustering {
    pub clusters: Vec<Vec<usize>>,
}

impl SemanticClustering {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Check the partition invariant against a response count.
    pub fn validate(&self, m: usize) -> Result<(), EntropyError> {
        let mut seen = vec![false; m];
        for cluster in &self.clusters {
            if cluster.is_empty() {
                return Err(EntropyError::EmptyCluster);
            }
            for &i in cluster {
                if i >= m || seen[i] {
                    return Err(EntropyError::BadClusterIndex { index: i, len: m });
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(EntropyError::BadDistribution(
                "clustering does not cover all responses".into(),
            ));
        }
        Ok(())
    }
}

/// Probabilities p(c_k | x) over the K clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution {
    pub probs: Vec<f64>,
}

impl ClusterDistribution {
    pub fn validate(&self) -> Result<(), EntropyError> {
        if self.probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(EntropyError::BadDistribution("negative probability".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EntropyError::BadDistribution(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterProbMode {
    /// Weight each response by its joint sequence likelihood, normalised
    /// over the M samples.
    Likelihood,
    /// Weight each cluster by its member count, |c_k| / M.
    Discrete,
}

/// Scoring method identifiers used throughout the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Aseu,
    Lnpe,
    Pe,
    Se,
    Seu,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Aseu => "aseu",
            Method::Lnpe => "lnpe",
            Method::Pe => "pe",
            Method::Se => "se",
            Method::Seu => "seu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aseu" => Some(Method::Aseu),
            "lnpe" => Some(Method::Lnpe),
            "pe" => Some(Method::Pe),
            "se" => Some(Method::Se),
            "seu" => Some(Method::Seu),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One uncertainty value for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub record_id: String,
    pub method: Method,
    pub value: f64,
}

/// Two texts are semantically equivalent iff the oracle labels each as
/// entailing the other.
pub fn bidirectional_equivalent(
    a: &str,
    b: &str,
    question: &str,
    oracle: &dyn EntailmentOracle,
) -> Result<bool, EntropyError> {
    let forward = oracle
        .judge(a, b, question)
        .map_err(|reason| EntropyError::OracleFailure {
            premise: a.to_string(),
            hypothesis: b.to_string(),
            reason,
        })?;
    if forward != EntailmentLabel::Entailment {
        return Ok(false);
    }
    let backward = oracle
        .judge(b, a, question)
        .map_err(|reason| EntropyError::OracleFailure {
            premise: b.to_string(),
            hypothesis: a.to_string(),
            reason,
        })?;
    Ok(backward == EntailmentLabel::Entailment)
}

/// Greedy single-pass clustering. Responses are visited in input order and
/// compared against the first member of each existing cluster in creation
/// order; the candidate joins the first bidirectionally-equivalent cluster
/// or opens a new one. Oracle budget is at most 2*M*K judgments.
pub fn cluster(
    responses: &[String],
    question: &str,
    oracle: &dyn EntailmentOracle,
) -> Result<SemanticClustering, EntropyError> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, text) in responses.iter().enumerate() {
        let mut placed = false;
        for cluster in clusters.iter_mut() {
            let representative = &responses[cluster[0]];
            if bidirectional_equivalent(representative, text, question, oracle)? {
                cluster.push(i);
                placed = true;
                break;
            }
        }
        if !placed {
            clusters.push(vec![i]);
        }
    }
    Ok(SemanticClustering { clusters })
}

/// Cluster probabilities from member responses. In likelihood mode each
/// response contributes exp(sum of token log-probs), computed stably by
/// subtracting the max joint log-probability before exponentiating, then
/// normalised over the M samples.
pub fn cluster_distribution(
    clustering: &SemanticClustering,
    responses: &[Response],
    mode: ClusterProbMode,
) -> Result<ClusterDistribution, EntropyError> {
    clustering.validate(responses.len())?;
    let probs = match mode {
        ClusterProbMode::Discrete => {
            let m = responses.len() as f64;
            clustering
                .clusters
                .iter()
                .map(|c| c.len() as f64 / m)
                .collect()
        }
        ClusterProbMode::Likelihood => {
            let joints: Vec<f64> = responses.iter().map(Response::joint_logprob).collect();
            let max = joints.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = joints.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            clustering
                .clusters
                .iter()
                .map(|c| c.iter().map(|&i| weights[i]).sum::<f64>() / total)
                .collect()
        }
    };
    let dist = ClusterDistribution { probs };
    dist.validate()?;
    Ok(dist)
}

/// Shannon entropy over the cluster distribution, in nats. 0*log 0 is 0.
pub fn semantic_entropy(dist: &ClusterDistribution) -> f64 {
    dist.probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Predictive entropy: mean over the M sequences of the negative joint
/// log-probability.
pub fn predictive_entropy(set: &GenerationSet) -> Result<f64, EntropyError> {
    per_sequence_mean(set, |r, _| -r.joint_logprob())
}

/// Length-normalised predictive entropy: each sequence's negative joint
/// log-probability divided by its token count, averaged over sequences.
pub fn lnpe(set: &GenerationSet) -> Result<f64, EntropyError> {
    per_sequence_mean(set, |r, t| -r.joint_logprob() / t as f64)
}

fn per_sequence_mean(
    set: &GenerationSet,
    score: impl Fn(&Response, usize) -> f64,
) -> Result<f64, EntropyError> {
    let mut total = 0.0;
    for (index, r) in set.responses.iter().enumerate() {
        if r.tokens.is_empty() {
            return Err(EntropyError::EmptyTokenList { index });
        }
        total += score(r, r.tokens.len());
    }
    Ok(total / set.responses.len() as f64)
}
