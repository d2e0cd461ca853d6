//! Compute SEU — one minus the mean pairwise cosine similarity — for a
//! small set of response embeddings.
//!
//! Run with: cargo run --example seu_basics

use semuq::geometry::{cosine, mean_pairwise_similarity, seu, EmbeddingVector};

fn main() {
    let embeddings: Vec<EmbeddingVector> = [
        vec![0.9, 0.1, 0.0],
        vec![0.8, 0.2, 0.1],
        vec![0.1, 0.9, 0.3],
    ]
    .into_iter()
    .map(|v| EmbeddingVector::new(v).expect("valid embedding"))
    .collect();

    for (i, a) in embeddings.iter().enumerate() {
        for (j, b) in embeddings.iter().enumerate().skip(i + 1) {
            let c = cosine(a, b).unwrap();
            println!("cos(e{i}, e{j}) = {c:.4}");
        }
    }

    let mean = mean_pairwise_similarity(&embeddings).unwrap();
    let u = seu(&embeddings).unwrap();
    println!("mean pairwise similarity = {mean:.4}");
    println!("SEU = 1 - mean = {u:.4}");

    // identical responses carry zero semantic uncertainty
    let same = vec![
        EmbeddingVector::new(vec![1.0, 2.0]).unwrap(),
        EmbeddingVector::new(vec![2.0, 4.0]).unwrap(), // same direction
    ];
    println!("SEU of aligned responses = {:.4}", seu(&same).unwrap());
}
