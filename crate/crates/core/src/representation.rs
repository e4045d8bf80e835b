//! Detector inputs: every transform's logit row reordered by the permutation
//! that sorts the Identity row, truncated to `k'` entries and concatenated.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::blackbox::{derive_error_label, ErrorLabelRule};
use crate::detector::LabeledFeatures;
use crate::imageops::TransformId;
use crate::score_io::{base_id, ScoreTable};

#[derive(Debug, thiserror::Error)]
pub enum RepresentationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Which transforms and how many sorted entries per row make up a feature
/// vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub transform_set: Vec<TransformId>,
    pub k_prime: usize,
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.transform_set.len() * self.k_prime
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointRepresentation {
    /// Row-major `(m+1) x k'` matrix, rows in transform-set order.
    pub features: Vec<f64>,
    /// Class indices in descending order of the Identity logits.
    pub permutation: Vec<usize>,
    pub k_prime: usize,
}

/// Class indices by descending logit; ties go to the smaller index.
pub fn sort_permutation(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps ascending index order among equal values.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order
}

/// `k'` used when none is configured: 5 at k = 10, 10 at k = 100, 20 at
/// k = 1000, linear in log10 k between those anchors, never above k.
pub fn default_k_prime(k: usize) -> usize {
    if k < 10 {
        return k.min(5);
    }
    let x = (k as f64).log10();
    let v = if x <= 2.0 { 5.0 + 5.0 * (x - 1.0) } else { 10.0 + 10.0 * (x - 2.0) };
    (v.round() as usize).clamp(1, k)
}

/// Builds the joint representation from logit rows given in `transform_set`
/// order (`rows[i]` belongs to `transform_set[i]`).
pub fn build_representation(
    rows: &[&[f64]],
    transform_set: &[TransformId],
    k_prime: usize,
) -> Result<JointRepresentation, RepresentationError> {
    if rows.len() != transform_set.len() {
        return Err(RepresentationError::InvalidArgument(format!(
            "{} rows for {} transforms",
            rows.len(),
            transform_set.len()
        )));
    }
    let id = transform_set
        .iter()
        .position(|&t| t == TransformId::Identity)
        .ok_or_else(|| RepresentationError::InvalidArgument("the identity row is required".into()))?;
    let k = rows[id].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(RepresentationError::InvalidArgument("logit rows differ in length".into()));
    }
    if k_prime == 0 || k_prime > k {
        return Err(RepresentationError::InvalidArgument(format!("k' = {k_prime} must lie in 1..={k}")));
    }
    let permutation = sort_permutation(rows[id]);
    let mut features = Vec::with_capacity(rows.len() * k_prime);
    for row in rows {
        features.extend(permutation[..k_prime].iter().map(|&c| row[c]));
    }
    Ok(JointRepresentation { features, permutation, k_prime })
}

/// Convenience wrapper keyed by transform.
pub fn build_representation_from_map(
    rows: &HashMap<TransformId, Vec<f64>>,
    transform_set: &[TransformId],
    k_prime: usize,
) -> Result<JointRepresentation, RepresentationError> {
    if rows.len() != transform_set.len() {
        return Err(RepresentationError::InvalidArgument("rows must cover exactly the transform set".into()));
    }
    let ordered: Vec<&[f64]> = transform_set
        .iter()
        .map(|t| {
            rows.get(t)
                .map(Vec::as_slice)
                .ok_or_else(|| RepresentationError::InvalidArgument(format!("missing {t} row")))
        })
        .collect::<Result<_, _>>()?;
    build_representation(&ordered, transform_set, k_prime)
}

/// How labels are assigned when building a detector data set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LabelMode {
    /// 1 iff the classifier erred on the Identity row.
    #[default]
    Error,
    /// Every example is positive (novel inputs).
    AllNovel,
    /// Unknown labels (-1) are positive, known ones fall back to `Error`.
    Novelty,
}

/// One row per table example whose base id is in `split` (all examples when
/// `split` is `None`), in table order.
pub fn build_dataset(
    table: &ScoreTable,
    split: Option<&[String]>,
    rule: ErrorLabelRule,
    k_prime: usize,
    mode: LabelMode,
) -> Result<(Vec<JointRepresentation>, Vec<u8>), RepresentationError> {
    let keep: Option<std::collections::HashSet<&str>> = split.map(|s| s.iter().map(String::as_str).collect());
    if let Some(keep) = &keep {
        let present: std::collections::HashSet<&str> = table.example_ids().map(base_id).collect();
        if let Some(missing) = keep.iter().find(|id| !present.contains(*id)) {
            return Err(RepresentationError::InvalidArgument(format!(
                "split id {missing:?} is not in the score table"
            )));
        }
    }
    let id_row = table
        .transform_index(TransformId::Identity)
        .ok_or_else(|| RepresentationError::InvalidArgument("table has no identity rows".into()))?;
    let mut reps = Vec::new();
    let mut labels = Vec::new();
    for (id, ex) in table.iter() {
        if keep.as_ref().is_some_and(|k| !k.contains(base_id(id))) {
            continue;
        }
        let rows: Vec<&[f64]> = ex.logits.iter().map(Vec::as_slice).collect();
        let label = match (mode, ex.true_label) {
            (LabelMode::AllNovel, _) | (LabelMode::Novelty, -1) => 1,
            (_, -1) => {
                return Err(RepresentationError::InvalidArgument(format!("example {id:?} has an unknown label")))
            }
            (_, y) => derive_error_label(&ex.logits[id_row], y as usize, rule)
                .map_err(|e| RepresentationError::InvalidArgument(e.to_string()))?,
        };
        reps.push(build_representation(&rows, table.transform_set(), k_prime)?);
        labels.push(label);
    }
    Ok((reps, labels))
}

/// [`build_dataset`] flattened into detector training input.
pub fn build_features(
    table: &ScoreTable,
    split: Option<&[String]>,
    rule: ErrorLabelRule,
    k_prime: usize,
    mode: LabelMode,
) -> Result<LabeledFeatures, RepresentationError> {
    let (reps, labels) = build_dataset(table, split, rule, k_prime, mode)?;
    Ok(LabeledFeatures { features: reps.into_iter().map(|r| r.features).collect(), labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn permutation_examples() {
        assert_eq!(sort_permutation(&[2.0, -1.0, 3.0, 0.5]), vec![2, 0, 3, 1]);
        assert_eq!(sort_permutation(&[5.0, 5.0, 1.0]), vec![0, 1, 2]);
        assert_eq!(sort_permutation(&[4.0, 3.0, 2.0]), vec![0, 1, 2]);
    }

    #[test]
    fn two_row_example() {
        let set = [TransformId::Identity, TransformId::HorizontalFlip];
        let r = build_representation(&[&[1.0, 3.0, 2.0], &[0.5, 0.2, 0.9]], &set, 3).unwrap();
        assert_eq!(r.features, vec![3.0, 2.0, 1.0, 0.2, 0.9, 0.5]);
        assert_eq!(r.permutation, vec![1, 2, 0]);
    }

    #[test]
    fn figure_shape() {
        let set = &TransformId::ALL[..4];
        let rows: Vec<Vec<f64>> = (0..4).map(|t| (0..6).map(|c| (t * 6 + c) as f64 * 0.37 % 1.0).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert_eq!(build_representation(&refs, set, 4).unwrap().features.len(), 16);
    }

    #[test]
    fn invalid_arguments() {
        let set = [TransformId::Identity];
        assert!(build_representation(&[&[1.0, 2.0]], &set, 3).is_err());
        assert!(build_representation(&[&[1.0, 2.0]], &set, 0).is_err());
        assert!(build_representation(&[&[1.0, 2.0]], &[TransformId::Grayscale], 1).is_err());
    }

    #[test]
    fn default_k_prime_anchors() {
        assert_eq!(default_k_prime(10), 5);
        assert_eq!(default_k_prime(100), 10);
        assert_eq!(default_k_prime(1000), 20);
        assert_eq!(default_k_prime(3), 3);
        assert_eq!(default_k_prime(8), 5);
        assert_eq!(default_k_prime(2), 2);
        let mid = default_k_prime(316);
        assert!((14..=16).contains(&mid));
    }

    fn arb_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (2usize..9, 1usize..7)
            .prop_flat_map(|(k, m)| (proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, k), m), 1..=k))
    }

    proptest! {
        #[test]
        fn identity_only_is_plain_sort(row in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            let r = build_representation(&[&row], &[TransformId::Identity], row.len()).unwrap();
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(r.features, sorted);
        }

        #[test]
        fn joint_structure((rows, kp) in arb_rows(), seed in any::<u64>(), shift in -5.0f64..5.0) {
            let set = &TransformId::ALL[..rows.len()];
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let r = build_representation(&refs, set, kp).unwrap();
            prop_assert_eq!(r.features.len(), rows.len() * kp);
            prop_assert!(r.features[..kp].windows(2).all(|w| w[0] >= w[1]));
            for (t, row) in rows.iter().enumerate() {
                for j in 0..kp {
                    prop_assert_eq!(r.features[t * kp + j], row[r.permutation[j]]);
                }
            }

            // Relabeling classes consistently in every row changes nothing
            // (distinct Identity values keep the order tie-free).
            let k = rows[0].len();
            let mut relabel: Vec<usize> = (0..k).collect();
            let mut s = seed;
            for i in (1..k).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                relabel.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut distinct = rows.clone();
            for (c, v) in distinct[0].iter_mut().enumerate() {
                *v += c as f64 * 1e-3;
            }
            let permuted: Vec<Vec<f64>> = distinct.iter().map(|row| relabel.iter().map(|&c| row[c]).collect()).collect();
            let a = build_representation(&distinct.iter().map(Vec::as_slice).collect::<Vec<_>>(), set, kp).unwrap();
            let b = build_representation(&permuted.iter().map(Vec::as_slice).collect::<Vec<_>>(), set, kp).unwrap();
            prop_assert_eq!(a.features, b.features);

            let shifted: Vec<f64> = rows[0].iter().map(|v| v + shift).collect();
            prop_assert_eq!(sort_permutation(&shifted), sort_permutation(&rows[0]));
        }
    }
}
