//! Label answers with Rouge-L, rank them by uncertainty, and produce an
//! AUROC, a ROC curve, and a report directory with SVG plots.
//!
//! Run with: cargo run --example rouge_eval

use semuq::evaluation::{
    auroc, emit_report, label_correct, roc_curve, rouge_l, youden_point, LabeledScore, ReportRow,
};

fn main() {
    // Rouge-L is case- and punctuation-insensitive
    let pairs = [
        ("The capital is Paris.", "the capital is paris"),
        ("Paris", "The capital of France is Paris"),
        ("Berlin", "Paris"),
    ];
    for (cand, reference) in pairs {
        println!("rouge_l({cand:?}, {reference:?}) = {:.4}", rouge_l(cand, reference));
    }

    let references = vec!["Paris".to_string(), "city of Paris".to_string()];
    for cand in ["Paris", "paris!", "Berlin"] {
        let ok = label_correct(cand, &references, 0.3).unwrap();
        println!("{cand:?} correct (threshold 0.3): {ok}");
    }

    // lower uncertainty should mean more likely correct
    let scored = vec![
        LabeledScore { record_id: "a".into(), uncertainty: 0.1, correct: true },
        LabeledScore { record_id: "b".into(), uncertainty: 0.3, correct: true },
        LabeledScore { record_id: "c".into(), uncertainty: 0.5, correct: false },
        LabeledScore { record_id: "d".into(), uncertainty: 0.4, correct: true },
        LabeledScore { record_id: "e".into(), uncertainty: 0.9, correct: false },
    ];
    let area = auroc(&scored).unwrap();
    let curve = roc_curve(&scored).unwrap();
    let j = youden_point(&curve).unwrap();
    println!("AUROC = {area:.4}");
    println!(
        "Youden point: threshold {:.2}, fpr {:.2}, tpr {:.2}",
        j.threshold, j.fpr, j.tpr
    );

    let out = std::env::temp_dir().join("semuq_rouge_eval_example");
    emit_report(
        &[ReportRow {
            method: "seu".into(),
            dataset: "demo".into(),
            model: "example".into(),
            auroc: area,
            youden: j,
            n: scored.len(),
            curve,
        }],
        &out,
    )
    .unwrap();
    println!("report written to {}", out.display());
}
