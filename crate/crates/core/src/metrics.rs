//! ROC / AUROC and coverage-vs-accuracy (CAC) / AUCAC.
//!
//! Label convention: `1` marks the positive class (an error or a novel input)
//! and detectors emit larger scores for more suspicious inputs. CAC takes
//! correctness labels instead (`1` = the classifier was right).

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::InvalidArgument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::InvalidArgument(format!("non-finite score at index {i}")));
    }
    let mut positives = 0;
    for (i, &l) in labels.iter().enumerate() {
        match l {
            0 => {}
            1 => positives += 1,
            other => return Err(MetricsError::InvalidArgument(format!("label {other} at index {i} is not binary"))),
        }
    }
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::Undefined("AUROC needs both positive and negative examples".into()));
    }
    Ok((positives, negatives))
}

/// Mann-Whitney estimate of `P(score_pos > score_neg) + P(equal) / 2`, via
/// midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; tied runs share the mean rank. Work in doubled ranks
    // so every intermediate is an integer.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Mean of ranks i+1..=j, doubled.
        let doubled_mid = (i + 1 + j) as u128;
        let run_positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled_mid * run_positives;
        i = j;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are flagged; `+inf` for the all-negative corner.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

/// Sweeps a threshold through every distinct score, from high to low.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve, MetricsError> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Trapezoids accumulate as integer multiples of 1/(2 P N).
    let mut doubled_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += ((fp - prev_fp) * (tp + prev_tp)) as u128;
        points.push(RocPoint { threshold, fpr: fp as f64 / negatives as f64, tpr: tp as f64 / positives as f64 });
    }
    let auroc = doubled_area as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(RocCurve { points, auroc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CacPoint {
    pub coverage: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacCurve {
    pub points: Vec<CacPoint>,
    pub aucac: f64,
}

/// Keeps the `i` examples with the lowest error score for `i = 1..=N` (ties
/// resolved by input order) and records the accuracy on each kept portion.
///
/// The area is trapezoidal over coverage, with the first point's accuracy
/// held constant down to coverage 0.
pub fn cac_curve(error_scores: &[f64], correct: &[u8]) -> Result<CacCurve, MetricsError> {
    if error_scores.is_empty() {
        return Err(MetricsError::InvalidArgument("CAC needs at least one example".into()));
    }
    if error_scores.len() != correct.len() {
        return Err(MetricsError::InvalidArgument(format!(
            "{} scores but {} correctness labels",
            error_scores.len(),
            correct.len()
        )));
    }
    if let Some(i) = error_scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::InvalidArgument(format!("non-finite score at index {i}")));
    }
    if let Some(i) = correct.iter().position(|&c| c > 1) {
        return Err(MetricsError::InvalidArgument(format!("correctness label at index {i} is not binary")));
    }
    let n = error_scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|&a, &b| error_scores[a].partial_cmp(&error_scores[b]).unwrap_or(Ordering::Equal));

    let mut points = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (kept, &idx) in order.iter().enumerate() {
        hits += correct[idx] as usize;
        let count = kept + 1;
        points.push(CacPoint { coverage: count as f64 / n as f64, accuracy: hits as f64 / count as f64 });
    }
    let mut aucac = points[0].coverage * points[0].accuracy;
    for pair in points.windows(2) {
        aucac += (pair[1].coverage - pair[0].coverage) * (pair[0].accuracy + pair[1].accuracy) / 2.0;
    }
    Ok(CacCurve { points, aucac })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReport {
    pub name: String,
    pub auroc: f64,
    pub aucac: f64,
    pub roc: RocCurve,
    pub cac: CacCurve,
}

/// Scores one detector on an evaluation split. `labels` are the positives
/// for ROC (error or novel); `correct` drives the CAC.
pub fn evaluate_detector(
    name: &str,
    scores: &[f64],
    labels: &[u8],
    correct: &[u8],
) -> Result<DetectorReport, MetricsError> {
    let roc = roc_curve(scores, labels)?;
    let cac = cac_curve(scores, correct)?;
    Ok(DetectorReport { name: name.to_string(), auroc: roc.auroc, aucac: cac.aucac, roc, cac })
}

/// CSV with columns `threshold,fpr,tpr`.
pub fn write_roc_csv<W: Write>(curve: &RocCurve, mut out: W) -> Result<(), MetricsError> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}

/// CSV with columns `coverage,accuracy`.
pub fn write_cac_csv<W: Write>(curve: &CacCurve, mut out: W) -> Result<(), MetricsError> {
    writeln!(out, "coverage,accuracy")?;
    for p in &curve.points {
        writeln!(out, "{},{}", p.coverage, p.accuracy)?;
    }
    Ok(())
}

/// CSV with columns `detector,auroc,aucac`, one row per report.
pub fn write_summary_csv<W: Write>(reports: &[DetectorReport], mut out: W) -> Result<(), MetricsError> {
    writeln!(out, "detector,auroc,aucac")?;
    for r in reports {
        writeln!(out, "{},{},{}", r.name, r.auroc, r.aucac)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive pairwise probability: positives beating negatives plus half
    /// the ties, over all P*N pairs.
    fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn worked_auroc_fixtures() {
        let scores = [0.9, 0.8, 0.1, 0.7];
        let labels = [1, 1, 0, 0];
        assert_eq!(pairwise_auroc(&scores, &labels), 1.0);
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);

        let scores = [0.6, 0.2, 0.4, 0.5];
        assert_eq!(pairwise_auroc(&scores, &labels), 0.5);
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);

        assert_eq!(auroc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::Undefined(_))));
        assert!(matches!(roc_curve(&[0.1, 0.2], &[0, 0]), Err(MetricsError::Undefined(_))));
        assert!(auroc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    #[test]
    fn perfect_separation_reaches_top_left() {
        let curve = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(curve.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn negated_scores_reflect_the_curve() {
        let scores = [0.3, 0.9, 0.4, 0.4, 0.1, 0.75];
        let labels = [1, 1, 0, 1, 0, 0];
        let a = roc_curve(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = roc_curve(&neg, &labels).unwrap();
        assert!((a.auroc + b.auroc - 1.0).abs() < 1e-12);
        // Negating flips "flagged" into "not flagged": every vertex maps to
        // (1 - fpr, 1 - tpr), traversed in reverse.
        let mut reflected: Vec<(f64, f64)> = a.points.iter().map(|p| (1.0 - p.fpr, 1.0 - p.tpr)).collect();
        reflected.reverse();
        let b_pts: Vec<(f64, f64)> = b.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(reflected.len(), b_pts.len());
        for (r, q) in reflected.iter().zip(&b_pts) {
            assert!((r.0 - q.0).abs() < 1e-12 && (r.1 - q.1).abs() < 1e-12);
        }
    }

    #[test]
    fn worked_cac_fixture() {
        let curve = cac_curve(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 1]).unwrap();
        let expected = [(0.25, 1.0), (0.5, 1.0), (0.75, 2.0 / 3.0), (1.0, 0.75)];
        assert_eq!(curve.points.len(), 4);
        for (p, (c, a)) in curve.points.iter().zip(expected) {
            assert_eq!(p.coverage, c);
            assert_eq!(p.accuracy, a);
        }
    }

    #[test]
    fn perfect_detector_holds_full_accuracy() {
        let scores = [0.1, 0.9, 0.2, 0.8, 0.3];
        let correct = [1, 0, 1, 0, 1];
        let curve = cac_curve(&scores, &correct).unwrap();
        for p in &curve.points {
            if p.coverage <= 0.6 + 1e-12 {
                assert_eq!(p.accuracy, 1.0);
            }
        }
        assert_eq!(curve.points.last().unwrap().accuracy, 0.6);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn constant_scores_average_to_overall_accuracy() {
        // Averaged over every input order, each coverage level has the overall
        // accuracy in expectation.
        let correct = [1u8, 0, 1, 1, 0];
        let overall = 3.0 / 5.0;
        let perms = permutations(correct.len());
        let mut mean = vec![0.0; correct.len()];
        for perm in &perms {
            let c: Vec<u8> = perm.iter().map(|&i| correct[i]).collect();
            let curve = cac_curve(&[0.5; 5], &c).unwrap();
            for (m, p) in mean.iter_mut().zip(&curve.points) {
                *m += p.accuracy;
            }
        }
        for m in mean {
            assert!((m / perms.len() as f64 - overall).abs() < 1e-12);
        }
    }

    #[test]
    fn cac_rejects_empty() {
        assert!(cac_curve(&[], &[]).is_err());
    }

    #[test]
    fn report_and_csvs() {
        let r = evaluate_detector("msr", &[0.9, 0.1, 0.6], &[1, 0, 0], &[0, 1, 1]).unwrap();
        assert_eq!(r.auroc, 1.0);
        let mut buf = Vec::new();
        write_summary_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("detector,auroc,aucac\nmsr,1,"));
        let mut buf = Vec::new();
        write_roc_csv(&r.roc, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    }

    fn fixture() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 5.0).collect()),
                    proptest::collection::vec(0u8..2, n),
                )
            })
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    }

    proptest! {
        #[test]
        fn rank_and_trapezoid_agree_with_pairs((scores, labels) in fixture()) {
            let rank = auroc(&scores, &labels).unwrap();
            let trap = roc_curve(&scores, &labels).unwrap();
            prop_assert!((rank - pairwise_auroc(&scores, &labels)).abs() <= 1e-12);
            prop_assert!((rank - trap.auroc).abs() <= 1e-12);
            let distinct = {
                let mut s = scores.clone();
                s.sort_by(f64::total_cmp);
                s.dedup();
                s.len()
            };
            prop_assert!(trap.points.len() <= distinct + 1);
            for w in trap.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn auroc_invariant_to_monotone_maps((scores, labels) in fixture()) {
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
        }
    }
}
