//! Explanations read straight off the linear layer: global descriptor-class
//! weights and per-image contributions `c_j = s_ij * W[class][j]`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::privnet::{LinearModel, PrivnetError};

pub const DEFAULT_TOP_K: usize = 5;
const REPORT_HEADER: &str = "# itm explanation report";

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] PrivnetError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub descriptor: String,
    pub class: String,
    pub weight: f64,
    #[serde(rename = "P_j")]
    pub privacy_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalExplanation {
    pub edges: Vec<Edge>,
}

/// One edge per (descriptor, class), descriptor-major.
pub fn global_explanation(model: &LinearModel) -> GlobalExplanation {
    let edges = model
        .descriptors
        .iter()
        .enumerate()
        .flat_map(|(j, d)| {
            model.class_names.iter().enumerate().map(move |(c, class)| Edge {
                descriptor: d.name.clone(),
                class: class.clone(),
                weight: model.weights[c][j],
                privacy_score: d.privacy_score,
            })
        })
        .collect();
    GlobalExplanation { edges }
}

/// Floats are written exactly as the JSON serializer writes them in model files.
fn json_float(x: f64) -> String {
    serde_json::to_string(&x).expect("finite weight")
}

/// `source,target,value` rows for Sankey tools.
pub fn sankey_csv(global: &GlobalExplanation) -> Result<String, ExplainError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["source", "target", "value"])?;
    for e in &global.edges {
        w.write_record([e.descriptor.as_str(), e.class.as_str(), json_float(e.weight).as_str()])?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub descriptor: String,
    pub words: Vec<String>,
    #[serde(rename = "P_j")]
    pub privacy_score: Option<f64>,
    pub score: f64,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassContributions {
    pub class: String,
    pub logit: f64,
    /// Every descriptor, by descending |value|, ties by descriptor order.
    pub contributions: Vec<Contribution>,
    pub top_positive: Vec<Contribution>,
    pub top_negative: Vec<Contribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub image_id: String,
    pub predicted: String,
    pub ground_truth: Option<String>,
    pub logits: Vec<f64>,
    pub classes: Vec<ClassContributions>,
}

fn class_contributions(model: &LinearModel, v: &[f64], c: usize, logit: f64, k: usize) -> ClassContributions {
    let mut all: Vec<(usize, Contribution)> = model
        .descriptors
        .iter()
        .enumerate()
        .map(|(j, d)| {
            (
                j,
                Contribution {
                    descriptor: d.name.clone(),
                    words: d.words.clone(),
                    privacy_score: d.privacy_score,
                    score: v[j],
                    weight: model.weights[c][j],
                    value: v[j] * model.weights[c][j],
                },
            )
        })
        .collect();
    all.sort_by(|a, b| b.1.value.abs().total_cmp(&a.1.value.abs()).then(a.0.cmp(&b.0)));
    let contributions: Vec<Contribution> = all.into_iter().map(|(_, x)| x).collect();
    let top_positive = contributions.iter().filter(|x| x.value > 0.0).take(k).cloned().collect();
    let top_negative = contributions.iter().filter(|x| x.value < 0.0).take(k).cloned().collect();
    ClassContributions {
        class: model.class_names[c].clone(),
        logit,
        contributions,
        top_positive,
        top_negative,
    }
}

/// Contributions toward the predicted class.
pub fn local_explanation(model: &LinearModel, image_id: &str, v: &[f64], k: usize) -> Result<LocalExplanation, ExplainError> {
    explain_classes(model, image_id, v, k, false)
}

/// Contributions toward every class.
pub fn local_explanation_all_classes(
    model: &LinearModel,
    image_id: &str,
    v: &[f64],
    k: usize,
) -> Result<LocalExplanation, ExplainError> {
    explain_classes(model, image_id, v, k, true)
}

fn explain_classes(
    model: &LinearModel,
    image_id: &str,
    v: &[f64],
    k: usize,
    all: bool,
) -> Result<LocalExplanation, ExplainError> {
    let (pred, logits) = model.predict(v)?;
    let classes = (0..model.class_names.len())
        .filter(|&c| all || c == pred)
        .map(|c| class_contributions(model, v, c, logits[c], k))
        .collect();
    Ok(LocalExplanation {
        image_id: image_id.to_string(),
        predicted: model.class_names[pred].clone(),
        ground_truth: None,
        logits,
        classes,
    })
}

fn fmt_pj(p: Option<f64>) -> String {
    p.map_or_else(|| "-".to_string(), |p| format!("{p:.2}"))
}

/// Plain-text table, one block per image in ascending image id order.
pub fn report_text(explanations: &[LocalExplanation]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    let mut sorted: Vec<&LocalExplanation> = explanations.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for e in sorted {
        let truth = e.ground_truth.as_deref().unwrap_or("-");
        let _ = writeln!(out, "\nimage {}  predicted {}  truth {}", e.image_id, e.predicted, truth);
        for c in &e.classes {
            let _ = writeln!(out, "class {}  logit {:+.6}", c.class, c.logit);
            let _ = writeln!(out, "  {:<4} {:>12} {:>7}  {:<20} words", "sign", "contribution", "P_j", "descriptor");
            for x in &c.contributions {
                let sign = if x.value > 0.0 {
                    "+"
                } else if x.value < 0.0 {
                    "-"
                } else {
                    "0"
                };
                let _ = writeln!(
                    out,
                    "  {:<4} {:>+12.6} {:>7}  {:<20} {}",
                    sign,
                    x.value + 0.0,
                    fmt_pj(x.privacy_score),
                    x.descriptor,
                    x.words.join(", ")
                );
            }
        }
    }
    out
}

/// Writes `path` as JSON and a text table next to it with a `.txt` extension.
pub fn render_report(explanations: &[LocalExplanation], path: &Path) -> Result<(), ExplainError> {
    let mut sorted = explanations.to_vec();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let json = serde_json::to_string_pretty(&sorted).expect("explanations serialize");
    let write = |p: &Path, body: &str| {
        std::fs::write(p, body).map_err(|source| ExplainError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    write(path, &json)?;
    write(&path.with_extension("txt"), &report_text(&sorted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_float_matches_serde() {
        assert_eq!(json_float(0.1), "0.1");
        assert_eq!(json_float(-1.0), "-1.0");
        assert_eq!(fmt_pj(None), "-");
    }
}
