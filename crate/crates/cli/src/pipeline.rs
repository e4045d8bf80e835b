//! End-to-end runs on the synthetic task: classifier training, scoring,
//! detector training and evaluation, plus both novelty experiments.

use std::collections::HashSet;
use std::path::Path;

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use invariance::blackbox::toy::{
    make_domain_images, make_toy_task_sized, train_toy_classifier, ToyClassifier, ToySplitSizes, ToyTask,
};
use invariance::detector::{self, DetectorModel};
use invariance::divergence::{transform_correlation_matrix, CorrelationMatrix, DivergenceKind};
use invariance::evaluation::{self, MLP_ALL_NAME, MLP_IDENTITY_NAME};
use invariance::metrics::DetectorReport;
use invariance::novelty::{
    run_class_novelty, run_ood_experiment, ClassNoveltyConfig, ClassNoveltyReport, DomainScores, NoveltyReport,
    OodExperiment, OodMode, OodSettings, SubsetEvent,
};
use invariance::representation::{build_features, FeatureSpec, LabelMode};
use invariance::score_io::{base_id, score_images, ScoreTable, SplitManifest};
use invariance::TransformId;

use crate::config::RunConfig;

pub fn make_task(cfg: &RunConfig) -> anyhow::Result<ToyTask> {
    Ok(make_toy_task_sized(cfg.seed, cfg.classes, cfg.sizes, &cfg.render)?)
}

pub fn train_classifier(cfg: &RunConfig, task: &ToyTask) -> anyhow::Result<ToyClassifier> {
    Ok(train_toy_classifier(&task.train, &cfg.classifier)?)
}

/// Scores the detector and evaluation splits; the manifest refers to base ids.
pub fn score_task(
    cfg: &RunConfig,
    classifier: &ToyClassifier,
    task: &ToyTask,
) -> anyhow::Result<(ScoreTable, SplitManifest)> {
    let images: Vec<_> = task.detector.iter().chain(&task.eval).cloned().collect();
    let table = score_images(classifier, &images, &cfg.transform_set, cfg.augmentation.as_ref(), cfg.copies)?;
    let detector_ids: Vec<String> = task.detector.iter().map(|i| i.id.clone()).collect();
    let eval_ids: Vec<String> = task.eval.iter().map(|i| i.id.clone()).collect();
    let manifest = SplitManifest::partition(&detector_ids, eval_ids, cfg.validation_fraction)?;
    Ok((table, manifest))
}

fn in_split(ids: &[String]) -> HashSet<&str> {
    ids.iter().map(String::as_str).collect()
}

/// Examples of `table` whose base id is listed in `ids`.
pub fn select(table: &ScoreTable, ids: &[String]) -> ScoreTable {
    let keep = in_split(ids);
    table.filter(|id| keep.contains(base_id(id)))
}

/// The two learned detectors every report carries: Identity scores only, and
/// the full transform set.
pub fn detector_specs(cfg: &RunConfig, k: usize) -> Vec<(String, FeatureSpec)> {
    let k_prime = cfg.k_prime_for(k);
    vec![
        (MLP_IDENTITY_NAME.to_string(), FeatureSpec { transform_set: vec![TransformId::Identity], k_prime }),
        (MLP_ALL_NAME.to_string(), FeatureSpec { transform_set: cfg.transform_set.clone(), k_prime }),
    ]
}

/// Trains one detector on `detector_train`, early-stopped on `detector_val`.
pub fn train_detector(
    cfg: &RunConfig,
    table: &ScoreTable,
    manifest: &SplitManifest,
    spec: &FeatureSpec,
) -> anyhow::Result<DetectorModel> {
    let narrowed = table.select_transforms(&spec.transform_set)?;
    let train = build_features(&narrowed, Some(&manifest.detector_train), cfg.rule, spec.k_prime, LabelMode::Error)?;
    let val = build_features(&narrowed, Some(&manifest.detector_val), cfg.rule, spec.k_prime, LabelMode::Error)?;
    let mut config = cfg.detector.clone();
    config.input_dim = spec.dim();
    Ok(detector::train(&config, &train, &val)?.with_features(spec.clone())?)
}

/// Baselines plus the given detectors, evaluated on the `eval` split.
pub fn evaluate(
    cfg: &RunConfig,
    table: &ScoreTable,
    manifest: &SplitManifest,
    models: &[(String, DetectorModel)],
) -> anyhow::Result<Vec<DetectorReport>> {
    let eval = select(table, &manifest.eval);
    if eval.is_empty() {
        bail!("the score table holds no evaluation examples");
    }
    let labels = build_features(&eval, None, cfg.rule, 1, LabelMode::Error)?.labels;
    let mut reports = evaluation::baseline_reports(&eval, &labels)?;
    for (name, model) in models {
        let spec =
            model.features.as_ref().with_context(|| format!("detector {name} does not record its feature layout"))?;
        let scores = evaluation::detector_scores(model, &eval, &spec.transform_set, spec.k_prime)?;
        reports.push(evaluation::report(name, &scores, &labels)?);
    }
    Ok(reports)
}

/// The toy task with its trained classifier and scored detector and
/// evaluation splits.
pub struct ScoredTask {
    pub task: ToyTask,
    pub classifier: ToyClassifier,
    pub eval_accuracy: f64,
    pub table: ScoreTable,
    pub manifest: SplitManifest,
}

pub fn prepare(cfg: &RunConfig) -> anyhow::Result<ScoredTask> {
    let task = make_task(cfg)?;
    let classifier = train_classifier(cfg, &task)?;
    let eval_accuracy = classifier.accuracy(&task.eval)?;
    log::info!("classifier: train accuracy {:.4}, eval accuracy {:.4}", classifier.train_accuracy, eval_accuracy);
    let (table, manifest) = score_task(cfg, &classifier, &task)?;
    Ok(ScoredTask { task, classifier, eval_accuracy, table, manifest })
}

pub struct ErrorDetectionRun {
    pub models: Vec<(String, DetectorModel)>,
    pub reports: Vec<DetectorReport>,
    pub correlation: CorrelationMatrix,
}

impl ErrorDetectionRun {
    pub fn report(&self, name: &str) -> Option<&DetectorReport> {
        self.reports.iter().find(|r| r.name == name)
    }
}

pub fn train_detectors(
    cfg: &RunConfig,
    table: &ScoreTable,
    manifest: &SplitManifest,
) -> anyhow::Result<Vec<(String, DetectorModel)>> {
    let mut models = Vec::new();
    for (name, spec) in detector_specs(cfg, table.k()) {
        let model = train_detector(cfg, table, manifest, &spec)?;
        log::info!("detector {name}: best epoch {:?}", model.history.best_epoch);
        models.push((name, model));
    }
    Ok(models)
}

pub fn run_error_detection(cfg: &RunConfig, scored: &ScoredTask) -> anyhow::Result<ErrorDetectionRun> {
    let models = train_detectors(cfg, &scored.table, &scored.manifest)?;
    let reports = evaluate(cfg, &scored.table, &scored.manifest, &models)?;
    let correlation = transform_correlation_matrix(&select(&scored.table, &scored.manifest.eval), DivergenceKind::Kl)?;
    Ok(ErrorDetectionRun { models, reports, correlation })
}

/// Runs the domain-novelty experiment in both modes on the familiar scores
/// of `run`.
pub fn run_ood(cfg: &RunConfig, run: &ScoredTask) -> anyhow::Result<Vec<(OodMode, NoveltyReport)>> {
    let n = cfg.ood.images_per_domain;
    let score_domain = |domain: invariance::blackbox::toy::ToyDomain| -> anyhow::Result<DomainScores> {
        let images = make_domain_images(cfg.seed, domain, 0, n);
        Ok(DomainScores {
            domain: domain.name().to_string(),
            table: score_images(&run.classifier, &images, &cfg.transform_set, None, 1)?,
        })
    };
    let cross_train = score_domain(cfg.ood.cross_domain)?;
    let novel_eval = score_domain(cfg.ood.novel_domain)?;
    let settings = OodSettings {
        detector: cfg.detector.clone(),
        k_prime: cfg.k_prime_for(run.table.k()),
        rule: cfg.rule,
        validation_fraction: cfg.validation_fraction,
    };
    let mut out = Vec::new();
    for mode in [OodMode::Plain, OodMode::CrossTrain] {
        let exp = OodExperiment {
            familiar_train: select(&run.table, &run.manifest.detector_train),
            familiar_val: select(&run.table, &run.manifest.detector_val),
            familiar_eval: select(&run.table, &run.manifest.eval),
            cross_train: cross_train.clone(),
            novel_eval: novel_eval.clone(),
            mode,
        };
        out.push((mode, run_ood_experiment(&exp, &settings)?));
    }
    Ok(out)
}

/// The novel-class sets of the class-novelty runs: the configured ones, or
/// distinct random draws from `draw_seed`.
pub fn novel_draws(cfg: &RunConfig) -> anyhow::Result<Vec<Vec<i64>>> {
    let cn = &cfg.class_novelty;
    if let Some(draws) = &cn.novel_classes {
        return Ok(draws.clone());
    }
    let available = invariance::novelty::combinations(&(0..cfg.classes as i64).collect::<Vec<_>>(), cn.novel_size);
    if available.len() < cn.draws {
        bail!("only {} distinct novel sets exist, {} requested", available.len(), cn.draws);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cn.draw_seed);
    let picked = rand::seq::index::sample(&mut rng, available.len(), cn.draws);
    Ok(picked.into_iter().map(|i| available[i].clone()).collect())
}

pub fn class_novelty_task(cfg: &RunConfig) -> anyhow::Result<ToyTask> {
    let per = cfg.class_novelty.images_per_class;
    let sizes = ToySplitSizes { train: cfg.sizes.train, detector: per, eval: per };
    Ok(make_toy_task_sized(cfg.seed, cfg.classes, sizes, &cfg.render)?)
}

/// One hold-out experiment per novel draw. Checkpoints of draw `i` live in
/// `checkpoint_root/draw_i`.
pub fn run_class_novelty_draws(
    cfg: &RunConfig,
    checkpoint_root: Option<&Path>,
    progress: &mut dyn FnMut(usize, &SubsetEvent),
) -> anyhow::Result<Vec<ClassNoveltyReport>> {
    let task = class_novelty_task(cfg)?;
    let mut out = Vec::new();
    for (i, novel) in novel_draws(cfg)?.into_iter().enumerate() {
        let config = ClassNoveltyConfig {
            novel_classes: novel,
            classifier: cfg.classifier.clone(),
            detector: cfg.detector.clone(),
            transform_set: cfg.transform_set.clone(),
            k_prime: cfg.k_prime,
            rule: cfg.rule,
            validation_fraction: cfg.validation_fraction,
        };
        let dir = checkpoint_root.map(|r| r.join(format!("draw_{i}")));
        let report = run_class_novelty(&task, &config, dir.as_deref(), &mut |e| progress(i, e))?;
        out.push(report);
    }
    Ok(out)
}
