//! The full batch pipeline — generate, score, evaluate — against seeded
//! mock backends, end to end in a temporary directory.
//!
//! Run with: cargo run --example mock_pipeline

use std::io::Write as _;
use std::sync::Arc;

use semuq::clients::{GenerationClient, MockLlm};
use semuq::dataset::SamplingConfig;
use semuq::entropy::Method;
use semuq::run::{build_clients, cmd_evaluate, cmd_generate, cmd_score, Correctness, RunConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("qa.jsonl");
    let mut f = std::fs::File::create(&dataset).unwrap();
    for line in [
        r#"{"id": "q1", "question": "capital of France?", "answers": ["Paris"]}"#,
        r#"{"id": "q2", "question": "2 plus 2?", "answers": ["four", "4"]}"#,
        r#"{"id": "q3", "question": "largest planet?", "answers": ["Jupiter"]}"#,
        r#"{"id": "q4", "question": "boiling point of water in C?", "answers": ["100"]}"#,
    ] {
        writeln!(f, "{line}").unwrap();
    }

    let cfg = RunConfig {
        dataset,
        cache_dir: dir.path().join("cache"),
        out_dir: dir.path().join("out"),
        seed: 42,
        mock: true,
        methods: vec![Method::Seu, Method::Se, Method::Pe, Method::Lnpe],
        rouge_threshold: 0.3,
        correctness: Correctness::First,
        dataset_name: Some("demo".into()),
        sampling: SamplingConfig {
            m: 5,
            temperature: 1.0,
            prompt_template: "Answer briefly. Q: {question}".into(),
            model_id: "mock-model".into(),
            max_tokens: 32,
        },
        endpoints: Default::default(),
        aseu: Default::default(),
    };

    // script the mock so two records answer correctly and two drift off
    let llm: Arc<dyn GenerationClient> = Arc::new(
        MockLlm::new(cfg.seed)
            .script("France", vec!["Paris".into(), "It is Paris".into()])
            .script("plus", vec!["four".into()])
            .script("planet", vec!["Saturn maybe".into(), "possibly Mars".into()])
            .script("boiling", vec!["around ninety".into()]),
    );

    let summary = cmd_generate(&cfg, &llm).unwrap();
    println!(
        "generate: {} records ({} new, {} cached)",
        summary.total, summary.generated, summary.cached
    );

    let clients = build_clients(&cfg);
    let scores = cmd_score(&cfg, &clients).unwrap();
    println!("--- {}:", scores.display());
    print!("{}", std::fs::read_to_string(&scores).unwrap());

    let report = cmd_evaluate(&cfg).unwrap();
    println!("--- {}:", report.display());
    print!("{}", std::fs::read_to_string(&report).unwrap());
}
