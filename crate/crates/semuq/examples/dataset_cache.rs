//! Load a JSONL question-answering dataset, render prompts, and use the
//! content-addressed generation cache.
//!
//! Run with: cargo run --example dataset_cache

use std::io::Write as _;

use semuq::dataset::{
    cache_key, load_dataset, load_generations, store_generations, GenerationSet, Response,
    SamplingConfig,
};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qa.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(
        f,
        r#"{{"id": "q1", "question": "capital of France?", "answers": ["Paris"]}}"#
    )
    .unwrap();
    writeln!(
        f,
        r#"{{"id": "q2", "question": "who wrote {{Hamlet}}?", "context": "Elizabethan drama", "answers": ["Shakespeare"]}}"#
    )
    .unwrap();

    let records = load_dataset(&path).unwrap();
    let sampling = SamplingConfig {
        m: 2,
        temperature: 0.7,
        prompt_template: "Context: {context}\nQ: {question}\nA:".into(),
        model_id: "demo-model".into(),
        max_tokens: 16,
    };

    for record in &records {
        let prompt = sampling.render_prompt(record);
        let key = cache_key(&record.id, &sampling, &prompt);
        println!("record {} -> cache key {}...", record.id, &key[..16]);

        let set = GenerationSet {
            record_id: record.id.clone(),
            responses: vec![
                Response {
                    text: "Paris".into(),
                    tokens: vec!["Paris".into()],
                    token_logprobs: vec![-0.1],
                },
                Response {
                    text: "maybe Lyon".into(),
                    tokens: vec!["maybe".into(), "Lyon".into()],
                    token_logprobs: vec![-1.5, -2.0],
                },
            ],
            sampling: sampling.clone(),
        };
        store_generations(&set, &key, dir.path()).unwrap();
        let back = load_generations(&key, dir.path()).unwrap();
        assert_eq!(back, set); // round trip is bit-exact, logprobs included
        println!(
            "  cached {} responses, joint logprob of first = {:.2}",
            back.responses.len(),
            back.responses[0].joint_logprob()
        );
    }

    // unknown keys simply miss
    assert!(load_generations("0".repeat(64).as_str(), dir.path()).is_none());
    println!("cache miss on unknown key, as expected");
}
