//! The black-box classifier contract (image in, logits out), softmax helpers,
//! error labeling, and the confidence baseline.

pub mod toy;

use serde::{Deserialize, Serialize};

use crate::imageops::ImageTensor;

#[derive(Debug, thiserror::Error)]
pub enum BlackBoxError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Model(#[from] crate::detector::DetectorError),
    #[error(transparent)]
    Image(#[from] crate::imageops::ImageError),
}

/// A frozen classifier that can only be queried.
pub trait BlackBoxClassifier {
    fn class_count(&self) -> usize;

    /// Raw class scores (logits) for one image; length is `class_count()`.
    fn score(&self, image: &ImageTensor) -> Result<Vec<f64>, BlackBoxError>;

    /// Human-readable label for each output index.
    fn class_names(&self) -> Vec<String> {
        (0..self.class_count()).map(|c| format!("class_{c}")).collect()
    }
}

/// An image with its ground-truth class (`-1` when unknown, e.g. for inputs
/// from another domain).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub label: i64,
    pub image: ImageTensor,
}

/// Numerically stable softmax (subtracts the maximum first).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest logit; ties go to the smallest index.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in logits.iter().enumerate().skip(1) {
        if s > logits[best] {
            best = i;
        }
    }
    best
}

/// Class indices of the `n` largest logits, ties by smallest index.
pub fn top_n(logits: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ErrorLabelRule {
    /// Error iff the predicted class differs from the true one.
    #[default]
    Top1,
    /// Error iff the true class is not among the `n` highest logits.
    TopN { n: usize },
}

/// 1 if the classifier erred on this example under `rule`, else 0.
pub fn derive_error_label(logits: &[f64], true_label: usize, rule: ErrorLabelRule) -> Result<u8, BlackBoxError> {
    let k = logits.len();
    if true_label >= k {
        return Err(BlackBoxError::InvalidArgument(format!("true label {true_label} out of range for {k} classes")));
    }
    let hit = match rule {
        ErrorLabelRule::Top1 => predict_class(logits) == true_label,
        ErrorLabelRule::TopN { n } => {
            if n == 0 || n >= k {
                return Err(BlackBoxError::InvalidArgument(format!(
                    "top-n rule needs 0 < n < k, got n = {n}, k = {k}"
                )));
            }
            top_n(logits, n).contains(&true_label)
        }
    };
    Ok((!hit) as u8)
}

/// Maximal-softmax-response baseline as an error score: `1 - max softmax`.
pub fn msr_score(logits: &[f64]) -> f64 {
    let p = softmax(logits);
    1.0 - p.iter().copied().fold(0.0, f64::max)
}

/// `1 - (sum of the n largest softmax entries)`. Exactly zero when `n >= k`.
pub fn msr_topn_score(logits: &[f64], n: usize) -> f64 {
    if n >= logits.len() {
        return 0.0;
    }
    let p = softmax(logits);
    let mut sorted = p.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    1.0 - sorted[..n].iter().sum::<f64>()
}
