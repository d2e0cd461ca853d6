//! Correctness labeling via Rouge-L, AUROC / ROC curves with proper tie
//! handling, Youden's-J operating points, and report emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one correct and one incorrect label (got {correct} correct, {incorrect} incorrect)")]
    DegenerateLabels { correct: usize, incorrect: usize },
    #[error("references must be non-empty")]
    EmptyReferences,
    #[error("ROC curve is empty")]
    EmptyCurve,
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One (uncertainty, correctness) pair fed to AUROC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub record_id: String,
    pub uncertainty: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Rouge-L F1 over lowercased, punctuation-stripped whitespace tokens.
/// Returns 0 when either side tokenizes to nothing or the LCS is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(&cand, &refr) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / refr.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// A candidate counts as correct when its best Rouge-L over the references
/// is strictly greater than the threshold.
pub fn label_correct(
    candidate: &str,
    references: &[String],
    threshold: f64,
) -> Result<bool, EvalError> {
    if references.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let best = references
        .iter()
        .map(|r| rouge_l(candidate, r))
        .fold(0.0f64, f64::max);
    Ok(best > threshold)
}

fn split_counts(scores: &[LabeledScore]) -> Result<(usize, usize), EvalError> {
    let correct = scores.iter().filter(|s| s.correct).count();
    let incorrect = scores.len() - correct;
    if correct == 0 || incorrect == 0 {
        return Err(EvalError::DegenerateLabels { correct, incorrect });
    }
    Ok((correct, incorrect))
}

/// AUROC as the Mann-Whitney statistic: the probability that a random
/// incorrect answer has strictly higher uncertainty than a random correct
/// one, with ties counted half. Computed via average ranks in O(n log n).
pub fn auroc(scores: &[LabeledScore]) -> Result<f64, EvalError> {
    let (n_correct, n_incorrect) = split_counts(scores)?;
    let mut indexed: Vec<(f64, bool)> = scores.iter().map(|s| (s.uncertainty, s.correct)).collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite uncertainties"));

    // average ranks over tie groups, 1-based
    let n = indexed.len();
    let mut rank_sum_incorrect = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && indexed[j].0 == indexed[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &indexed[i..j] {
            if !item.1 {
                rank_sum_incorrect += avg_rank;
            }
        }
        i = j;
    }
    let ni = n_incorrect as f64;
    let u = rank_sum_incorrect - ni * (ni + 1.0) / 2.0;
    Ok(u / (ni * n_correct as f64))
}

/// ROC curve under the paper's orientation: positive = correct response,
/// predicted positive when uncertainty <= threshold. One point per distinct
/// threshold plus the (0,0) anchor; the final point is (1,1).
pub fn roc_curve(scores: &[LabeledScore]) -> Result<Vec<RocPoint>, EvalError> {
    let (n_correct, n_incorrect) = split_counts(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.iter().map(|s| (s.uncertainty, s.correct)).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite uncertainties"));

    let mut curve = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let threshold = sorted[i].0;
        while i < n && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_incorrect as f64,
            tpr: tp as f64 / n_correct as f64,
        });
    }
    Ok(curve)
}

/// Trapezoidal area under a ROC curve.
pub fn roc_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// The point maximizing J = TPR - FPR. Ties broken by lower FPR, then
/// lower threshold.
pub fn youden_point(curve: &[RocPoint]) -> Result<RocPoint, EvalError> {
    curve
        .iter()
        .copied()
        .reduce(|best, p| {
            let jb = best.tpr - best.fpr;
            let jp = p.tpr - p.fpr;
            if jp > jb
                || (jp == jb && (p.fpr < best.fpr || (p.fpr == best.fpr && p.threshold < best.threshold)))
            {
                p
            } else {
                best
            }
        })
        .ok_or(EvalError::EmptyCurve)
}

/// One row of the final report, carrying its curve for SVG emission.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub model: String,
    pub auroc: f64,
    pub youden: RocPoint,
    pub n: usize,
    pub curve: Vec<RocPoint>,
}

/// Write report.csv plus one roc_<method>.svg per method. Rows are ordered
/// by method name; CSV values use 4 decimal places.
pub fn emit_report(rows: &[ReportRow], out_dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.method.cmp(&b.method));

    let mut csv = String::from("method,dataset,model,auroc,fpr_at_j,tpr_at_j,n\n");
    for row in &sorted {
        csv.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{}\n",
            row.method, row.dataset, row.model, row.auroc, row.youden.fpr, row.youden.tpr, row.n
        ));
    }
    let csv_path = out_dir.join("report.csv");
    fs::write(&csv_path, csv).map_err(|source| EvalError::Io {
        path: csv_path.display().to_string(),
        source,
    })?;

    for row in &sorted {
        let svg = render_roc_svg(&row.method, &row.curve, row.auroc);
        let svg_path = out_dir.join(format!("roc_{}.svg", row.method));
        fs::write(&svg_path, svg).map_err(|source| EvalError::Io {
            path: svg_path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Self-contained SVG: axes, diagonal reference line, and the curve as a
/// polyline. Deterministic byte output for a given input.
pub fn render_roc_svg(method: &str, curve: &[RocPoint], area: f64) -> String {
    const W: f64 = 480.0;
    const H: f64 = 480.0;
    const MARGIN: f64 = 50.0;
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let x = |fpr: f64| MARGIN + fpr * plot_w;
    let y = |tpr: f64| H - MARGIN - tpr * plot_h;

    let points: Vec<String> = curve
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr)))
        .collect();

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{} (AUROC {:.4})</text>\n",
        W / 2.0,
        method,
        area
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m:.1}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{m:.1}\" y1=\"{t:.1}\" x2=\"{m:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">False positive rate</text>\n",
        W / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\">True positive rate</text>\n",
        H / 2.0,
        H / 2.0
    ));
    // diagonal reference
    svg.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"gray\" stroke-dasharray=\"5,5\"/>\n",
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    ));
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        points.join(" ")
    ));
    svg.push_str("</svg>\n");
    svg
}
