//! Acceptance checks. The oracle checks are self-contained; the experiment
//! checks judge the results of a pipeline run.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use invariance::detector::{compute_loss_weights, gradient_check, DetectorConfig, DetectorModel};
use invariance::divergence::{divergence, DivergenceKind};
use invariance::evaluation::{MLP_ALL_NAME, MLP_IDENTITY_NAME, MSR_NAME};
use invariance::imageops::{apply_transform, ImageTensor};
use invariance::metrics::{auroc, cac_curve};
use invariance::novelty::{combinations, ClassNoveltyReport, NoveltyReport, OodMode};
use invariance::representation::{build_representation, sort_permutation};
use invariance::TransformId;

use crate::pipeline::ErrorDetectionRun;
use crate::reports::class_novelty_means;

pub const ORDERING_BUDGET: Duration = Duration::from_secs(15 * 60);
pub const CLASS_NOVELTY_BUDGET: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn seconds(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn run_timed(name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    match outcome {
        Ok(detail) => match budget {
            Some(b) if elapsed > b => CheckResult::new(
                name,
                false,
                format!("{detail}; took {} over the {} budget", seconds(elapsed), seconds(b)),
            ),
            _ => CheckResult::new(name, true, format!("{detail} ({})", seconds(elapsed))),
        },
        Err(detail) => CheckResult::new(name, false, detail),
    }
}

/// Backprop against central differences on five random detector shapes.
pub fn gradient_oracle() -> CheckResult {
    run_timed("gradient oracle", Some(Duration::from_secs(10)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6a0d);
        let mut worst = 0.0f64;
        let mut count = 0;
        for case in 0..5 {
            let dim = rng.random_range(2..7);
            let depth = rng.random_range(1..4);
            let mut cfg = DetectorConfig::new(dim);
            cfg.hidden_widths = (0..depth).map(|_| rng.random_range(2..7)).collect();
            cfg.dropout_prob = if case % 2 == 0 { 0.0 } else { 0.3 };
            cfg.rng_seed = rng.random();
            let model = DetectorModel::initialize(cfg).map_err(|e| e.to_string())?;
            let n = rng.random_range(4..10);
            let features: Vec<Vec<f64>> =
                (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let weights = compute_loss_weights(&labels).map_err(|e| e.to_string())?.per_example(&labels);
            let masks = model.network.sample_masks(n, &mut rng);
            let check =
                gradient_check(&model, &features, &labels, &weights, &masks, 1e-5).map_err(|e| e.to_string())?;
            worst = worst.max(check.max_relative_error);
            count += check.parameters_checked;
        }
        let detail = format!("{count} parameters, max relative error {worst:.3e}");
        if worst < 1e-4 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut doubled = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1;
                doubled += match scores[i].partial_cmp(&scores[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

/// Midrank AUROC against the exhaustive pairwise probability.
pub fn auroc_oracle() -> CheckResult {
    run_timed("AUROC oracle", Some(Duration::from_secs(5)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = rng.random_range(2..80);
            // Coarse grids force ties.
            let levels = rng.random_range(2..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let fast = auroc(&scores, &labels).map_err(|e| e.to_string())?;
            worst = worst.max((fast - pairwise_auroc(&scores, &labels)).abs());
        }
        let detail = format!("1000 fixtures, max deviation {worst:.1e}");
        if worst <= 1e-12 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

pub fn cac_oracle() -> CheckResult {
    let expected = [(0.25, 1.0), (0.5, 1.0), (0.75, 2.0 / 3.0), (1.0, 0.75)];
    match cac_curve(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 1]) {
        Ok(curve) => {
            let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.coverage, p.accuracy)).collect();
            CheckResult::new("CAC oracle", got == expected, format!("points {got:?}"))
        }
        Err(e) => CheckResult::new("CAC oracle", false, e.to_string()),
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) + 1e-9).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

pub fn divergence_axioms() -> CheckResult {
    run_timed("divergence axioms", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xd1f);
        let mut self_max = 0.0f64;
        let mut js_asym = 0.0f64;
        let mut js_max = 0.0f64;
        for _ in 0..10_000 {
            let k = rng.random_range(2..12);
            let p = random_simplex(&mut rng, k);
            let q = random_simplex(&mut rng, k);
            for kind in DivergenceKind::ALL {
                let d = divergence(&p, &q, kind).map_err(|e| e.to_string())?;
                if d.is_nan() || d < 0.0 {
                    return Err(format!("{} gave {d} on a random pair", kind.name()));
                }
                self_max = self_max.max(divergence(&p, &p, kind).map_err(|e| e.to_string())?);
            }
            let pq = divergence(&p, &q, DivergenceKind::JensenShannon).map_err(|e| e.to_string())?;
            let qp = divergence(&q, &p, DivergenceKind::JensenShannon).map_err(|e| e.to_string())?;
            js_asym = js_asym.max((pq - qp).abs());
            js_max = js_max.max(pq);
        }
        let detail = format!("10000 pairs, max d(p,p) {self_max:.1e}, JS asymmetry {js_asym:.1e}, max JS {js_max:.4}");
        if self_max <= 1e-9 && js_asym <= 1e-12 && js_max <= std::f64::consts::LN_2 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

pub fn representation_checks() -> CheckResult {
    run_timed("representation", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5e7);
        let err = |e: invariance::representation::RepresentationError| e.to_string();
        for _ in 0..500 {
            let k = rng.random_range(1..15);
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(-3..4) as f64 * 0.5).collect();
            let r = build_representation(&[&row], &[TransformId::Identity], k).map_err(err)?;
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if r.features != sorted {
                return Err(format!("identity-only features of {row:?} are not the plain sort"));
            }
        }
        for _ in 0..500 {
            let m = rng.random_range(1..=TransformId::ALL.len());
            let k = rng.random_range(2..12);
            let kp = rng.random_range(1..=k);
            let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..k).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let set = &TransformId::ALL[..m];
            let r = build_representation(&refs, set, kp).map_err(err)?;
            if r.features.len() != m * kp || r.permutation != sort_permutation(&rows[0]) {
                return Err("feature length or permutation is off".into());
            }
            for (t, row) in rows.iter().enumerate() {
                for j in 0..kp {
                    if r.features[t * kp + j] != row[r.permutation[j]] {
                        return Err(format!("row {t} entry {j} does not follow the identity permutation"));
                    }
                }
            }
            // A consistent class relabeling leaves the features unchanged.
            let mut relabel: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                relabel.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<Vec<f64>> = rows.iter().map(|row| relabel.iter().map(|&c| row[c]).collect()).collect();
            let prefs: Vec<&[f64]> = permuted.iter().map(Vec::as_slice).collect();
            if build_representation(&prefs, set, kp).map_err(err)?.features != r.features {
                return Err("relabeling classes changed the features".into());
            }
        }
        let rows: Vec<Vec<f64>> = (0..4).map(|t| (0..6).map(|c| ((t * 6 + c) * 7 % 11) as f64).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let len = build_representation(&refs, &TransformId::ALL[..4], 4).map_err(err)?.features.len();
        if len != 16 {
            return Err(format!("m=3, k=6, k'=4 gave {len} features"));
        }
        Ok("plain-sort equivalence, joint permutation, 16-entry shape".into())
    })
}

pub fn transform_suite() -> CheckResult {
    run_timed("transform suite", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7f);
        let err = |e: invariance::ImageError| e.to_string();
        let mut gray_dev = 0.0f64;
        for _ in 0..100 {
            let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
            let px: Vec<f64> = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
            let img = ImageTensor::new(h, w, 3, px).map_err(err)?;
            let flipped = apply_transform(&img, TransformId::HorizontalFlip).map_err(err)?;
            if apply_transform(&flipped, TransformId::HorizontalFlip).map_err(err)? != img {
                return Err("flip twice is not the identity".into());
            }
            if apply_transform(&img, TransformId::Identity).map_err(err)? != img {
                return Err("identity changed the image".into());
            }
            let g = apply_transform(&img, TransformId::Grayscale).map_err(err)?;
            let gg = apply_transform(&g, TransformId::Grayscale).map_err(err)?;
            for (a, b) in g.pixels().iter().zip(gg.pixels()) {
                gray_dev = gray_dev.max((a - b).abs());
            }
            for t in TransformId::ALL {
                let out = apply_transform(&img, t).map_err(err)?;
                if out.pixels().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(format!("{t} left [0, 1]"));
                }
            }
        }
        let detail = format!("100 images, grayscale idempotence deviation {gray_dev:.1e}");
        if gray_dev <= 1e-12 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

pub fn oracle_checks() -> Vec<CheckResult> {
    vec![
        gradient_oracle(),
        auroc_oracle(),
        cac_oracle(),
        divergence_axioms(),
        representation_checks(),
        transform_suite(),
    ]
}

/// Smallest accepted lead of MLP + all transforms over MSR.
pub const MSR_MARGIN: f64 = 0.01;

pub fn ordering_check(run: &ErrorDetectionRun, elapsed: Duration) -> CheckResult {
    let name = "relative ordering";
    let (Some(all), Some(ident), Some(msr)) =
        (run.report(MLP_ALL_NAME), run.report(MLP_IDENTITY_NAME), run.report(MSR_NAME))
    else {
        return CheckResult::new(name, false, "missing detector reports".into());
    };
    let detail = format!(
        "AUROC mlp_all {:.4}, mlp_identity {:.4}, msr {:.4} ({})",
        all.auroc,
        ident.auroc,
        msr.auroc,
        seconds(elapsed)
    );
    let passed = all.auroc > ident.auroc
        && ident.auroc > 0.5
        && all.auroc >= msr.auroc + MSR_MARGIN
        && elapsed <= ORDERING_BUDGET;
    CheckResult::new(name, passed, detail)
}

pub fn class_novelty_check(reports: &[ClassNoveltyReport], elapsed: Duration) -> CheckResult {
    let name = "class novelty";
    if reports.len() < 3 {
        return CheckResult::new(name, false, format!("{} novel draws, at least 3 needed", reports.len()));
    }
    let mut subset_counts = Vec::new();
    for r in reports {
        let expected = combinations(&r.familiar_classes, r.novel_classes.len()).len();
        if r.subsets.len() != expected {
            return CheckResult::new(name, false, format!("{} subsets, expected {expected}", r.subsets.len()));
        }
        subset_counts.push(r.subsets.len());
    }
    let means = class_novelty_means(reports);
    let mean_of = |n: &str| means.iter().find(|(name, _, _)| name == n).map(|m| m.1);
    let (Some(full), Some(msr)) = (mean_of(MLP_ALL_NAME), mean_of(MSR_NAME)) else {
        return CheckResult::new(name, false, "missing detector reports".into());
    };
    let detail = format!(
        "{} draws, {subset_counts:?} auxiliary classifiers, mean AUROC mlp_all {full:.4} vs msr {msr:.4} ({})",
        reports.len(),
        seconds(elapsed)
    );
    CheckResult::new(name, full > msr && elapsed <= CLASS_NOVELTY_BUDGET, detail)
}

pub fn ood_check(results: &[(OodMode, NoveltyReport)]) -> CheckResult {
    let name = "ood harness";
    let get = |mode: OodMode| {
        results.iter().find(|(m, _)| *m == mode).and_then(|(_, r)| r.get(MLP_ALL_NAME)).map(|r| r.auroc)
    };
    match (get(OodMode::Plain), get(OodMode::CrossTrain)) {
        (Some(plain), Some(cross)) => {
            CheckResult::new(name, cross >= plain, format!("AUROC cross_train {cross:.4} vs plain {plain:.4}"))
        }
        _ => CheckResult::new(name, false, "missing mode reports".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_pass() {
        for c in oracle_checks() {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn pairwise_reference() {
        assert_eq!(pairwise_auroc(&[0.1, 0.2, 0.2, 0.9], &[0, 1, 0, 1]), 0.875);
    }
}
