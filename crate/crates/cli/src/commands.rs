//! Subcommand implementations. Each writes into one run directory that also
//! receives the resolved config.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};

use invariance::blackbox::toy::ToyClassifier;
use invariance::detector::{DetectorError, DetectorModel};
use invariance::divergence::{transform_correlation_matrix, DivergenceKind};
use invariance::imageops::{apply_transform, load_png, save_png};
use invariance::score_io::{load_score_csv, save_score_csv, score_images};
use invariance::{LabeledImage, ScoreTable, SplitManifest};

use crate::checks::{self, CheckResult};
use crate::config::RunConfig;
use crate::pipeline;
use crate::reports::{self, write_atomic};

/// Bad input or a failed check, as opposed to a runtime failure. Maps to
/// exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(message: impl Into<String>) -> anyhow::Error {
    Invalid(message.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<Invalid>()) {
        1
    } else {
        2
    }
}

fn output_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    cfg.output_dir.as_deref().ok_or_else(|| invalid("no output directory: pass --out or set output_dir"))
}

fn start_run(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = output_dir(cfg)?.to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    reports::write_config(&dir, cfg)?;
    Ok(dir)
}

const LABELS_FILE: &str = "labels.csv";
const MANIFEST_FILE: &str = "manifest.csv";

fn write_labels(path: &Path, images: &[LabeledImage]) -> anyhow::Result<()> {
    let mut s = String::from("example_id,true_label\n");
    for img in images {
        s.push_str(&format!("{},{}\n", img.id, img.label));
    }
    write_atomic(path, s.as_bytes())
}

fn read_labels(path: &Path) -> anyhow::Result<BTreeMap<String, i64>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let (Some(id), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(invalid(format!("{} row {}: expected example_id,true_label", path.display(), i + 2)));
        };
        let label: i64 = label
            .trim()
            .parse()
            .map_err(|_| invalid(format!("{} row {}: bad label {label:?}", path.display(), i + 2)))?;
        out.insert(id.to_string(), label);
    }
    Ok(out)
}

/// Generates the toy task, trains its classifier and writes the detector and
/// evaluation images with their split manifest.
pub fn toy(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = start_run(cfg)?;
    let task = pipeline::make_task(cfg)?;
    let classifier = pipeline::train_classifier(cfg, &task)?;
    log::info!("classifier train accuracy {:.4}", classifier.train_accuracy);
    classifier.save(&dir.join("classifier.json"))?;

    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let images: Vec<LabeledImage> = task.detector.iter().chain(&task.eval).cloned().collect();
    for img in &images {
        save_png(&img.image, &images_dir.join(format!("{}.png", img.id)))?;
    }
    write_labels(&images_dir.join(LABELS_FILE), &images)?;

    let detector_ids: Vec<String> = task.detector.iter().map(|i| i.id.clone()).collect();
    let eval_ids = task.eval.iter().map(|i| i.id.clone()).collect();
    SplitManifest::partition(&detector_ids, eval_ids, cfg.validation_fraction)?.save(&dir.join("splits"))?;
    println!("{} images and classifier written to {}", images.len(), dir.display());
    Ok(())
}

/// Expands a PNG directory into `out/<transform>/<id>.png` plus a manifest.
/// Labels come from `labels.csv` next to the images, else -1.
pub fn transform(cfg: &RunConfig, input: &Path) -> anyhow::Result<()> {
    let dir = start_run(cfg)?;
    let labels_path = input.join(LABELS_FILE);
    let labels = if labels_path.exists() { read_labels(&labels_path)? } else { BTreeMap::new() };
    let mut inputs: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    inputs.sort();
    for t in &cfg.transform_set {
        fs::create_dir_all(dir.join(t.name()))?;
    }
    let mut manifest = String::from("example_id,true_label\n");
    let mut failures = Vec::new();
    for path in &inputs {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let result = load_png(path).map_err(anyhow::Error::from).and_then(|img| {
            for &t in &cfg.transform_set {
                save_png(&apply_transform(&img, t)?, &dir.join(t.name()).join(format!("{id}.png")))?;
            }
            Ok(())
        });
        match result {
            Ok(()) => manifest.push_str(&format!("{id},{}\n", labels.get(&id).copied().unwrap_or(-1))),
            Err(e) => {
                eprintln!("{}: {e:#}", path.display());
                failures.push(path.display().to_string());
            }
        }
    }
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    if !failures.is_empty() {
        return Err(invalid(format!("{} of {} images failed", failures.len(), inputs.len())));
    }
    println!("{} images x {} transforms written to {}", inputs.len(), cfg.transform_set.len(), dir.display());
    Ok(())
}

/// Scores the Identity images of a transform tree; the fixed transforms are
/// reapplied in memory after any augmentation.
pub fn score(cfg: &RunConfig, classifier_path: &Path, manifest: &Path) -> anyhow::Result<()> {
    let dir = start_run(cfg)?;
    let classifier = ToyClassifier::load(classifier_path)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let labels = read_labels(manifest)?;
    let mut images = Vec::with_capacity(labels.len());
    for (id, &true_label) in &labels {
        let image = load_png(&root.join("identity").join(format!("{id}.png")))?;
        images.push(LabeledImage { id: id.clone(), image, label: true_label });
    }
    let table = score_images(&classifier, &images, &cfg.transform_set, cfg.augmentation.as_ref(), cfg.copies)?;
    save_score_csv(&table, &dir.join("scores.csv"))?;
    println!("{} examples scored into {}", table.len(), dir.join("scores.csv").display());
    Ok(())
}

fn load_inputs(scores: &Path, splits: &Path) -> anyhow::Result<(ScoreTable, SplitManifest)> {
    let table = load_score_csv(scores).map_err(|e| invalid(format!("{}: {e}", scores.display())))?;
    let manifest = SplitManifest::load(splits).map_err(|e| invalid(format!("{}: {e}", splits.display())))?;
    Ok((table, manifest))
}

/// Errors caused by the data rather than the machinery: single-class labels,
/// split ids missing from the table, undefined metrics.
fn flag_input_errors(e: anyhow::Error, what: &str) -> anyhow::Error {
    use invariance::metrics::MetricsError;
    use invariance::representation::RepresentationError;
    let by_input = e.chain().any(|c| {
        matches!(c.downcast_ref::<DetectorError>(), Some(DetectorError::DegenerateLabels(_)))
            || c.is::<RepresentationError>()
            || matches!(c.downcast_ref::<MetricsError>(), Some(MetricsError::Undefined(_)))
            || matches!(
                c.downcast_ref::<invariance::Error>(),
                Some(
                    invariance::Error::Representation(_)
                        | invariance::Error::Metrics(MetricsError::Undefined(_))
                        | invariance::Error::Detector(DetectorError::DegenerateLabels(_))
                )
            )
    });
    if by_input {
        invalid(format!("{what}: {e:#}"))
    } else {
        e
    }
}

/// Trains the Identity-only and all-transform detectors.
pub fn train_detector(cfg: &RunConfig, scores: &Path, splits: &Path) -> anyhow::Result<()> {
    let dir = start_run(cfg)?;
    let (table, manifest) = load_inputs(scores, splits)?;
    for (name, spec) in pipeline::detector_specs(cfg, table.k()) {
        let model = pipeline::train_detector(cfg, &table, &manifest, &spec).map_err(|e| flag_input_errors(e, &name))?;
        model.save(&dir.join(format!("{name}.json")))?;
        write_atomic(
            &dir.join(format!("training_log_{name}.csv")),
            reports::training_log_csv(&model.history).as_bytes(),
        )?;
        println!("{name}: kept epoch {:?}", model.history.best_epoch);
    }
    Ok(())
}

/// Writes the summary and curves of the baselines and the given detectors.
pub fn eval(cfg: &RunConfig, scores: &Path, splits: &Path, models: &[PathBuf]) -> anyhow::Result<()> {
    let dir = start_run(cfg)?;
    let (table, manifest) = load_inputs(scores, splits)?;
    let mut loaded = Vec::new();
    for path in models {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid(format!("bad model path {}", path.display())))?;
        loaded.push((name.to_string(), DetectorModel::load(path)?));
    }
    let summary = pipeline::evaluate(cfg, &table, &manifest, &loaded).map_err(|e| flag_input_errors(e, "eval"))?;
    reports::write_reports(&dir, &summary)?;
    let correlation = transform_correlation_matrix(&pipeline::select(&table, &manifest.eval), DivergenceKind::Kl)?;
    reports::write_correlation(&dir.join("correlation_kl.csv"), &correlation)?;
    for r in &summary {
        println!("{:<28} AUROC {:.4}  AUCAC {:.4}", r.name, r.auroc, r.aucac);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    /// Detect images from unfamiliar domains.
    Ood,
    /// Detect held-out classes.
    Classes,
}

pub fn novelty(cfg: &RunConfig, experiment: Experiment) -> anyhow::Result<()> {
    let dir = start_run(cfg)?;
    match experiment {
        Experiment::Ood => {
            let scored = pipeline::prepare(cfg)?;
            let results = pipeline::run_ood(cfg, &scored)?;
            write_ood(&dir, &results)?;
            println!("{}", checks::ood_check(&results).detail);
        }
        Experiment::Classes => {
            let results = run_classes(cfg, &dir)?;
            for (name, auroc, aucac) in reports::class_novelty_means(&results) {
                println!("{name:<28} mean AUROC {auroc:.4}  mean AUCAC {aucac:.4}");
            }
        }
    }
    Ok(())
}

fn write_ood(
    dir: &Path,
    results: &[(invariance::novelty::OodMode, invariance::novelty::NoveltyReport)],
) -> anyhow::Result<()> {
    write_atomic(&dir.join("summary.csv"), reports::ood_summary_csv(results).as_bytes())?;
    for (mode, report) in results {
        reports::write_reports(&dir.join(reports::mode_name(*mode)), &report.reports)?;
    }
    Ok(())
}

fn run_classes(cfg: &RunConfig, dir: &Path) -> anyhow::Result<Vec<invariance::novelty::ClassNoveltyReport>> {
    let mut log_text = String::from(reports::subset_log_header());
    let results = pipeline::run_class_novelty_draws(cfg, Some(&dir.join("checkpoints")), &mut |draw, e| {
        log::info!(
            "draw {draw}: auxiliary classifier {}/{} without {:?}{}",
            e.index + 1,
            e.total,
            e.held_out,
            if e.trained { "" } else { " (checkpoint)" }
        );
        log_text.push_str(&reports::subset_log_line(draw, e));
    })?;
    write_atomic(&dir.join("subsets.csv"), log_text.as_bytes())?;
    write_atomic(&dir.join("summary.csv"), reports::class_novelty_summary_csv(&results).as_bytes())?;
    Ok(results)
}

pub struct Reproduction {
    pub checks: Vec<CheckResult>,
    pub report: String,
}

impl Reproduction {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn header(cfg: &RunConfig) -> String {
    let aug = cfg.classifier.augmentation.map_or_else(|| "none".to_string(), |a| a.rng_seed.to_string());
    format!(
        "seeds: task {}, classifier {}, classifier augmentation {}, detector {}, novel draws {}\n",
        cfg.seed, cfg.classifier.rng_seed, aug, cfg.detector.rng_seed, cfg.class_novelty.draw_seed
    )
}

/// The full desk-scale pipeline with every acceptance check. Runs stop early
/// once the runtime budget is spent.
pub fn run_reproduce(cfg: &RunConfig) -> anyhow::Result<Reproduction> {
    let dir = start_run(cfg)?;
    let budget = Duration::from_secs(cfg.runtime_budget_secs);
    let start = Instant::now();
    let mut checks = checks::oracle_checks();
    let over_budget = |checks: &mut Vec<CheckResult>| {
        let spent = start.elapsed() > budget;
        if spent {
            checks.push(CheckResult {
                name: "runtime budget",
                passed: false,
                detail: format!("{:.0}s spent, budget {}s", start.elapsed().as_secs_f64(), budget.as_secs()),
            });
        }
        spent
    };

    let stage = Instant::now();
    let scored = pipeline::prepare(cfg)?;
    let run = pipeline::run_error_detection(cfg, &scored)?;
    checks.push(checks::ordering_check(&run, stage.elapsed()));
    let ed = dir.join("error_detection");
    reports::write_reports(&ed, &run.reports)?;
    reports::write_correlation(&ed.join("correlation_kl.csv"), &run.correlation)?;
    for (name, model) in &run.models {
        write_atomic(
            &ed.join(format!("training_log_{name}.csv")),
            reports::training_log_csv(&model.history).as_bytes(),
        )?;
    }

    if !over_budget(&mut checks) {
        let results = pipeline::run_ood(cfg, &scored)?;
        write_ood(&dir.join("ood"), &results)?;
        checks.push(checks::ood_check(&results));
    }
    if !over_budget(&mut checks) {
        let stage = Instant::now();
        let results = run_classes(cfg, &dir.join("class_novelty"))?;
        checks.push(checks::class_novelty_check(&results, stage.elapsed()));
    }
    if !over_budget(&mut checks) {
        checks.push(CheckResult {
            name: "runtime budget",
            passed: true,
            detail: format!("{:.0}s of {}s", start.elapsed().as_secs_f64(), budget.as_secs()),
        });
    }

    let mut report = header(cfg);
    report.push_str(&format!("classifier eval accuracy: {:.4}\n", scored.eval_accuracy));
    for c in &checks {
        report.push_str(&c.line());
        report.push('\n');
    }
    write_atomic(&dir.join("report.txt"), report.as_bytes())?;
    Ok(Reproduction { checks, report })
}

pub fn reproduce(cfg: &RunConfig) -> anyhow::Result<()> {
    let outcome = run_reproduce(cfg)?;
    print!("{}", outcome.report);
    if outcome.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = outcome.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(invalid(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Parses `--transforms identity,grayscale`.
pub fn parse_transforms(names: &[String]) -> anyhow::Result<Vec<invariance::TransformId>> {
    names
        .iter()
        .map(|n| n.trim().parse().map_err(|e| anyhow!("{e}")))
        .collect::<anyhow::Result<_>>()
        .map_err(|e| invalid(e.to_string()))
}
