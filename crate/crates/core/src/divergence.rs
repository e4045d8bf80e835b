//! Divergences between the Identity posterior and a transformed posterior,
//! the threshold detector on top of them, and the cross-transform
//! correlation diagnostic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blackbox::softmax;
use crate::imageops::TransformId;
use crate::score_io::{ScoreIoError, ScoreTable};

/// Additive smoothing inside the KL logarithm.
pub const KL_EPSILON: f64 = 1e-12;
const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DivergenceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Scores(#[from] ScoreIoError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[serde(rename = "kl")]
    Kl,
    JensenShannon,
    SquaredL2,
    KolmogorovSmirnov,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 4] = [
        DivergenceKind::Kl,
        DivergenceKind::JensenShannon,
        DivergenceKind::SquaredL2,
        DivergenceKind::KolmogorovSmirnov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::JensenShannon => "jensen_shannon",
            DivergenceKind::SquaredL2 => "squared_l2",
            DivergenceKind::KolmogorovSmirnov => "kolmogorov_smirnov",
        }
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<(), DivergenceError> {
    if p.is_empty() {
        return Err(DivergenceError::InvalidArgument(format!("{what} is empty")));
    }
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(DivergenceError::InvalidArgument(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(DivergenceError::InvalidArgument(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * ((pi + KL_EPSILON) / (qi + KL_EPSILON)).ln())
        .sum()
}

/// `D(p || q)` in nats. Inputs must be probability vectors of equal length.
pub fn divergence(p: &[f64], q: &[f64], kind: DivergenceKind) -> Result<f64, DivergenceError> {
    if p.len() != q.len() {
        return Err(DivergenceError::InvalidArgument(format!(
            "posteriors differ in length: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let d = match kind {
        DivergenceKind::Kl => kl(p, q),
        DivergenceKind::JensenShannon => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(p, &m) + 0.5 * kl(q, &m)
        }
        DivergenceKind::SquaredL2 => p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(),
        DivergenceKind::KolmogorovSmirnov => {
            let (mut cp, mut cq, mut best) = (0.0, 0.0, 0.0f64);
            for (a, b) in p.iter().zip(q) {
                cp += a;
                cq += b;
                best = best.max((cp - cq).abs());
            }
            best
        }
    };
    // Smoothing can leave a tiny negative residue for near-equal inputs.
    Ok(d.max(0.0))
}

/// Divergence between the posteriors of two logit rows.
pub fn divergence_from_logits(
    identity: &[f64],
    transformed: &[f64],
    kind: DivergenceKind,
) -> Result<f64, DivergenceError> {
    divergence(&softmax(identity), &softmax(transformed), kind)
}

/// Error score of one example under transform `t`: larger is more suspicious.
pub fn divergence_score(
    table: &ScoreTable,
    example_id: &str,
    t: TransformId,
    kind: DivergenceKind,
) -> Result<f64, DivergenceError> {
    let identity = table.logits(example_id, TransformId::Identity)?;
    let transformed = table.logits(example_id, t)?;
    divergence_from_logits(identity, transformed, kind)
}

/// Scores for every example of `table`, in table order.
pub fn divergence_scores(
    table: &ScoreTable,
    t: TransformId,
    kind: DivergenceKind,
) -> Result<Vec<f64>, DivergenceError> {
    table.example_ids().map(|id| divergence_score(table, id, t, kind)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceDetector {
    pub transform: TransformId,
    pub kind: DivergenceKind,
    pub threshold: f64,
}

impl DivergenceDetector {
    pub fn new(transform: TransformId, kind: DivergenceKind, threshold: f64) -> Result<Self, DivergenceError> {
        if transform == TransformId::Identity {
            return Err(DivergenceError::InvalidArgument("the identity transform has zero divergence".into()));
        }
        if threshold.is_nan() || threshold < 0.0 {
            return Err(DivergenceError::InvalidArgument(format!("threshold must be >= 0, got {threshold}")));
        }
        Ok(Self { transform, kind, threshold })
    }

    /// True (flag as error) iff `score >= threshold`.
    pub fn detect(&self, score: f64) -> bool {
        score >= self.threshold
    }
}

/// Pearson correlation of two equally long samples; `None` when either has
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub transforms: Vec<TransformId>,
    /// Row-major; `None` where a score column has zero variance.
    pub values: Vec<Vec<Option<f64>>>,
}

/// Correlation matrix over columns of scores. Each column is one variable.
pub fn correlation_of_columns(columns: &[Vec<f64>]) -> Result<Vec<Vec<Option<f64>>>, DivergenceError> {
    let n = columns.first().map_or(0, Vec::len);
    if n < 2 || columns.iter().any(|c| c.len() != n) {
        return Err(DivergenceError::InvalidArgument("need at least two examples and equally long columns".into()));
    }
    let m = columns.len();
    let mut values = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i..m {
            let r =
                if i == j { pearson(&columns[i], &columns[i]).map(|_| 1.0) } else { pearson(&columns[i], &columns[j]) };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(values)
}

/// Pearson correlations, across examples, between the divergence scores of
/// every pair of non-Identity transforms in the table.
pub fn transform_correlation_matrix(
    table: &ScoreTable,
    kind: DivergenceKind,
) -> Result<CorrelationMatrix, DivergenceError> {
    let transforms: Vec<TransformId> =
        table.transform_set().iter().copied().filter(|&t| t != TransformId::Identity).collect();
    if transforms.is_empty() {
        return Err(DivergenceError::InvalidArgument("table has no non-identity transforms".into()));
    }
    let columns: Vec<Vec<f64>> =
        transforms.iter().map(|&t| divergence_scores(table, t, kind)).collect::<Result<_, _>>()?;
    Ok(CorrelationMatrix { transforms, values: correlation_of_columns(&columns)? })
}

impl CorrelationMatrix {
    /// CSV with a `transform` column and one column per transform; undefined
    /// entries are written as `NA`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DivergenceError> {
        let names: Vec<&str> = self.transforms.iter().map(|t| t.name()).collect();
        writeln!(out, "transform,{}", names.join(","))?;
        for (name, row) in names.iter().zip(&self.values) {
            let cells: Vec<String> =
                row.iter().map(|v| v.map_or_else(|| "NA".to_string(), |r| format!("{r}"))).collect();
            writeln!(out, "{name},{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_io::ExampleScores;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1), summed at 40 digits.
    const KL_HALF_VS_NINE: f64 = 0.510_825_623_765_990_7;

    #[test]
    fn worked_values() {
        let d = divergence(&[0.5, 0.5], &[0.9, 0.1], DivergenceKind::Kl).unwrap();
        assert!((d - KL_HALF_VS_NINE).abs() < 1e-9);
        assert_eq!(divergence(&[1.0, 0.0], &[0.0, 1.0], DivergenceKind::SquaredL2).unwrap(), 2.0);
        assert_eq!(divergence(&[1.0, 0.0], &[0.0, 1.0], DivergenceKind::KolmogorovSmirnov).unwrap(), 1.0);
        let js = divergence(&[1.0, 0.0], &[0.0, 1.0], DivergenceKind::JensenShannon).unwrap();
        assert!((js - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs() {
        assert!(divergence(&[0.5, 0.5], &[1.0], DivergenceKind::Kl).is_err());
        assert!(divergence(&[0.5, 0.6], &[0.5, 0.5], DivergenceKind::Kl).is_err());
        assert!(divergence(&[1.5, -0.5], &[0.5, 0.5], DivergenceKind::SquaredL2).is_err());
    }

    #[test]
    fn threshold_detector() {
        let d = DivergenceDetector::new(TransformId::Grayscale, DivergenceKind::Kl, 0.0).unwrap();
        assert!(d.detect(0.0) && d.detect(3.0));
        let never = DivergenceDetector::new(TransformId::Grayscale, DivergenceKind::Kl, f64::INFINITY).unwrap();
        assert!(!never.detect(1e300));
        let at = DivergenceDetector::new(TransformId::Grayscale, DivergenceKind::Kl, 0.25).unwrap();
        assert!(at.detect(0.25) && !at.detect(0.249_999));
        assert!(DivergenceDetector::new(TransformId::Identity, DivergenceKind::Kl, 0.1).is_err());
        assert!(DivergenceDetector::new(TransformId::Grayscale, DivergenceKind::Kl, -0.1).is_err());
    }

    #[test]
    fn scores_from_table() {
        let set = vec![TransformId::Identity, TransformId::HorizontalFlip, TransformId::Grayscale];
        let mut t = ScoreTable::new(3, set).unwrap();
        t.insert(
            "a".into(),
            ExampleScores {
                true_label: 0,
                logits: vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![11.0, 12.0, 13.0]],
            },
        )
        .unwrap();
        for kind in DivergenceKind::ALL {
            assert!(divergence_score(&t, "a", TransformId::HorizontalFlip, kind).unwrap() < 1e-12);
            assert!(divergence_score(&t, "a", TransformId::Grayscale, kind).unwrap() < 1e-12);
        }
        assert!(divergence_score(&t, "a", TransformId::GammaCorrect, DivergenceKind::Kl).is_err());
        assert!(divergence_score(&t, "b", TransformId::Grayscale, DivergenceKind::Kl).is_err());
    }

    #[test]
    fn correlation_cases() {
        let col = vec![1.0, 2.0, 4.0, 3.0];
        let m = correlation_of_columns(&[col.clone(), col.clone(), vec![5.0; 4]]).unwrap();
        assert!((m[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m[0][0], Some(1.0));
        assert_eq!(m[2][2], None);
        assert_eq!(m[0][2], None);

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let m = correlation_of_columns(&[a, b]).unwrap();
        assert!(m[0][1].unwrap().abs() < 0.05);
        assert_eq!(m[0][1], m[1][0]);
    }

    fn simplex_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..10).prop_flat_map(|k| {
            (proptest::collection::vec(0.0f64..1.0, k), proptest::collection::vec(0.0f64..1.0, k)).prop_map(|(a, b)| {
                let norm = |v: Vec<f64>| {
                    let s: f64 = v.iter().sum();
                    if s == 0.0 {
                        vec![1.0 / v.len() as f64; v.len()]
                    } else {
                        v.iter().map(|x| x / s).collect()
                    }
                };
                (norm(a), norm(b))
            })
        })
    }

    proptest! {
        #[test]
        fn axioms((p, q) in simplex_pair()) {
            for kind in DivergenceKind::ALL {
                prop_assert!(divergence(&p, &q, kind).unwrap() >= 0.0);
                prop_assert!(divergence(&p, &p, kind).unwrap() <= 1e-9);
            }
            let js = divergence(&p, &q, DivergenceKind::JensenShannon).unwrap();
            prop_assert_eq!(js, divergence(&q, &p, DivergenceKind::JensenShannon).unwrap());
            prop_assert!(js <= std::f64::consts::LN_2 + 1e-12);
        }

        #[test]
        fn smoothing_is_negligible_for_positive_q((p, q) in simplex_pair()) {
            prop_assume!(q.iter().all(|&x| x > 1e-3));
            let exact: f64 = p.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum();
            prop_assert!((divergence(&p, &q, DivergenceKind::Kl).unwrap() - exact).abs() < 1e-9);
        }

        #[test]
        fn logit_shift_invariance(s in proptest::collection::vec(-5.0f64..5.0, 2..8), shift in -20.0f64..20.0) {
            let t: Vec<f64> = s.iter().rev().copied().collect();
            let shifted: Vec<f64> = t.iter().map(|v| v + shift).collect();
            let a = divergence_from_logits(&s, &t, DivergenceKind::Kl).unwrap();
            let b = divergence_from_logits(&s, &shifted, DivergenceKind::Kl).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
