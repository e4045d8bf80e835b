//! Evaluation rows shared by the error and novelty experiments: the
//! confidence baseline, one divergence detector per transform and learned
//! detectors, all scored on the same examples.

use crate::blackbox::msr_score;
use crate::detector::DetectorModel;
use crate::divergence::{divergence_scores, DivergenceKind};
use crate::imageops::TransformId;
use crate::metrics::{evaluate_detector, DetectorReport};
use crate::representation::build_representation;
use crate::score_io::ScoreTable;
use crate::Result;

pub const MSR_NAME: &str = "msr";
pub const MLP_IDENTITY_NAME: &str = "mlp_identity";
pub const MLP_ALL_NAME: &str = "mlp_all";

pub fn kl_name(t: TransformId) -> String {
    format!("kl_{}", t.name())
}

/// Report for one score column; CAC correctness is the complement of
/// `labels`.
pub fn report(name: &str, scores: &[f64], labels: &[u8]) -> Result<DetectorReport> {
    let correct: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
    Ok(evaluate_detector(name, scores, labels, &correct)?)
}

pub fn msr_scores(table: &ScoreTable) -> Result<Vec<f64>> {
    table.example_ids().map(|id| Ok(msr_score(table.logits(id, TransformId::Identity)?))).collect()
}

/// MSR followed by a KL detector for every non-Identity transform.
pub fn baseline_reports(table: &ScoreTable, labels: &[u8]) -> Result<Vec<DetectorReport>> {
    let mut out = vec![report(MSR_NAME, &msr_scores(table)?, labels)?];
    for &t in table.transform_set().iter().filter(|&&t| t != TransformId::Identity) {
        out.push(report(&kl_name(t), &divergence_scores(table, t, DivergenceKind::Kl)?, labels)?);
    }
    Ok(out)
}

/// Feature vectors of every example under `transform_set`, in table order.
pub fn table_features(table: &ScoreTable, transform_set: &[TransformId], k_prime: usize) -> Result<Vec<Vec<f64>>> {
    let narrowed = table.select_transforms(transform_set)?;
    narrowed
        .iter()
        .map(|(_, ex)| {
            let rows: Vec<&[f64]> = ex.logits.iter().map(Vec::as_slice).collect();
            Ok(build_representation(&rows, transform_set, k_prime)?.features)
        })
        .collect()
}

/// Error scores of a trained detector on every example of `table`.
pub fn detector_scores(
    model: &DetectorModel,
    table: &ScoreTable,
    transform_set: &[TransformId],
    k_prime: usize,
) -> Result<Vec<f64>> {
    Ok(model.predict_scores(&table_features(table, transform_set, k_prime)?)?)
}
