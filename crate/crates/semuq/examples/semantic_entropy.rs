//! Cluster sampled answers by bidirectional entailment and compute
//! semantic entropy, predictive entropy, and its length-normalized form.
//!
//! Run with: cargo run --example semantic_entropy

use semuq::clients::{MockEntailer, MockOracle};
use semuq::dataset::{GenerationSet, Response, SamplingConfig};
use semuq::entropy::{
    cluster, cluster_distribution, lnpe, predictive_entropy, semantic_entropy, ClusterProbMode,
};

fn response(text: &str, logprobs: &[f64]) -> Response {
    Response {
        text: text.to_string(),
        tokens: text.split_whitespace().map(str::to_string).collect(),
        token_logprobs: logprobs.to_vec(),
    }
}

fn main() {
    let question = "Who wrote Hamlet?";
    let responses = vec![
        response("Shakespeare", &[-0.2]),
        response("William Shakespeare", &[-0.4, -0.3]),
        response("Francis Bacon", &[-1.0, -1.2]),
    ];
    let texts: Vec<String> = responses.iter().map(|r| r.text.clone()).collect();

    // the first two answers entail each other; the third is its own cluster
    let oracle = MockOracle {
        entailer: MockEntailer::new().equivalent("Shakespeare", "William Shakespeare"),
    };

    let clustering = cluster(&texts, question, &oracle).unwrap();
    println!("clusters: {:?}", clustering.clusters);

    for mode in [ClusterProbMode::Likelihood, ClusterProbMode::Discrete] {
        let dist = cluster_distribution(&clustering, &responses, mode).unwrap();
        let se = semantic_entropy(&dist);
        println!("{mode:?}: probs {:?} -> SE = {se:.4} nats", dist.probs);
    }

    let set = GenerationSet {
        record_id: "hamlet".into(),
        responses,
        sampling: SamplingConfig {
            m: 3,
            temperature: 1.0,
            prompt_template: "{question}".into(),
            model_id: "example".into(),
            max_tokens: 8,
        },
    };
    println!("PE   = {:.4}", predictive_entropy(&set).unwrap());
    println!("LNPE = {:.4}", lnpe(&set).unwrap());
}
