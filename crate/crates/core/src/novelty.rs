//! Novelty experiments.
//!
//! *Domain novelty* trains the error detector on familiar-domain scores,
//! optionally adding scores of images from a second unfamiliar domain
//! labeled as novel, and evaluates on a 50/50 mix of familiar images and a
//! third, unseen domain.
//!
//! *Class novelty* holds out classes: a classifier `h` is trained on the
//! familiar classes, and for every way of hiding `S_N` of them an auxiliary
//! classifier trained on the rest scores the familiar images, the hidden
//! ones labeled novel. The detector trained on the pooled auxiliary scores is
//! then applied to `h` on images of every class.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blackbox::toy::{train_toy_classifier, ToyClassifier, ToyClassifierConfig, ToyTask};
use crate::blackbox::{derive_error_label, BlackBoxError, ErrorLabelRule, LabeledImage};
use crate::detector::train::TrainingHistory;
use crate::detector::{self, DetectorConfig, LabeledFeatures};
use crate::evaluation::{self, MLP_ALL_NAME, MLP_IDENTITY_NAME};
use crate::imageops::TransformId;
use crate::metrics::DetectorReport;
use crate::representation::{build_features, LabelMode};
use crate::score_io::{self, is_validation_position, merge_tables, score_images, ScoreTable};
use crate::{Error, Result};

/// 1 when the input is novel: its true class is not among the classifier's
/// `class_labels` (or unknown, `-1`), or the classifier got it wrong.
pub fn novelty_label(
    logits: &[f64],
    true_label: i64,
    class_labels: &[i64],
    rule: ErrorLabelRule,
) -> Result<u8, BlackBoxError> {
    match class_labels.iter().position(|&c| c == true_label) {
        None => Ok(1),
        Some(idx) => derive_error_label(logits, idx, rule),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    Plain,
    CrossTrain,
}

/// Scores of unlabeled images from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainScores {
    pub domain: String,
    pub table: ScoreTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodExperiment {
    /// Familiar-domain detector training scores, true labels known.
    pub familiar_train: ScoreTable,
    pub familiar_val: ScoreTable,
    pub familiar_eval: ScoreTable,
    /// Unfamiliar domain merged into training in `CrossTrain` mode.
    pub cross_train: DomainScores,
    /// Novel domain of the evaluation mix; never seen in training.
    pub novel_eval: DomainScores,
    pub mode: OodMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSettings {
    pub detector: DetectorConfig,
    pub k_prime: usize,
    #[serde(default)]
    pub rule: ErrorLabelRule,
    /// Share of the cross-training domain kept for validation.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoveltyReport {
    pub reports: Vec<DetectorReport>,
    pub eval_familiar: usize,
    pub eval_novel: usize,
    pub histories: Vec<(String, TrainingHistory)>,
}

impl NoveltyReport {
    pub fn get(&self, name: &str) -> Option<&DetectorReport> {
        self.reports.iter().find(|r| r.name == name)
    }
}

fn split_by_position(table: &ScoreTable, fraction: f64) -> (ScoreTable, ScoreTable) {
    let val: HashSet<String> = table
        .example_ids()
        .enumerate()
        .filter(|(i, _)| is_validation_position(*i, fraction))
        .map(|(_, id)| id.to_string())
        .collect();
    (table.filter(|id| !val.contains(id)), table.filter(|id| val.contains(id)))
}

fn first_n(table: &ScoreTable, n: usize) -> ScoreTable {
    let keep: HashSet<String> = table.example_ids().take(n).map(String::from).collect();
    table.filter(|id| keep.contains(id))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    Ok(())
}

pub fn run_ood_experiment(exp: &OodExperiment, settings: &OodSettings) -> Result<NoveltyReport> {
    if exp.cross_train.domain == exp.novel_eval.domain {
        return Err(Error::Config(format!(
            "cross-training domain {:?} must differ from the evaluation domain",
            exp.cross_train.domain
        )));
    }
    let cross_ids: HashSet<&str> = exp.cross_train.table.example_ids().collect();
    if exp.novel_eval.table.example_ids().any(|id| cross_ids.contains(id)) {
        return Err(Error::Config("cross-training and evaluation images overlap".into()));
    }
    check_fraction(settings.validation_fraction)?;
    let set = exp.familiar_train.transform_set().to_vec();
    let (kp, rule) = (settings.k_prime, settings.rule);

    let mut train = build_features(&exp.familiar_train, None, rule, kp, LabelMode::Novelty)?;
    let mut val = build_features(&exp.familiar_val, None, rule, kp, LabelMode::Novelty)?;
    if exp.mode == OodMode::CrossTrain {
        let (cross_train, cross_val) = split_by_position(&exp.cross_train.table, settings.validation_fraction);
        train.extend(build_features(&cross_train, None, rule, kp, LabelMode::AllNovel)?);
        val.extend(build_features(&cross_val, None, rule, kp, LabelMode::AllNovel)?);
    }
    let mut config = settings.detector.clone();
    config.input_dim = set.len() * kp;
    let model = detector::train(&config, &train, &val)?;

    // Equal numbers of familiar and novel images.
    let n = exp.familiar_eval.len().min(exp.novel_eval.table.len());
    if n == 0 {
        return Err(Error::Config("evaluation needs familiar and novel images".into()));
    }
    let mix = merge_tables(&first_n(&exp.familiar_eval, n), &first_n(&exp.novel_eval.table, n))?;
    let labels = build_features(&mix, None, rule, kp, LabelMode::Novelty)?.labels;

    let mut reports = evaluation::baseline_reports(&mix, &labels)?;
    reports.push(evaluation::report(MLP_ALL_NAME, &evaluation::detector_scores(&model, &mix, &set, kp)?, &labels)?);
    Ok(NoveltyReport {
        reports,
        eval_familiar: n,
        eval_novel: n,
        histories: vec![(MLP_ALL_NAME.into(), model.history)],
    })
}

/// All `size`-element subsets of `items`, in lexicographic order.
pub fn combinations<T: Clone>(items: &[T], size: usize) -> Vec<Vec<T>> {
    let n = items.len();
    if size > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i].clone()).collect());
        let Some(pos) = (0..size).rev().find(|&i| idx[i] != i + n - size) else {
            return out;
        };
        idx[pos] += 1;
        for j in pos + 1..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassNoveltyConfig {
    /// Classes withheld from `h`; their count is also the size of every
    /// auxiliary hold-out subset.
    pub novel_classes: Vec<i64>,
    #[serde(default)]
    pub classifier: ToyClassifierConfig,
    pub detector: DetectorConfig,
    #[serde(default = "all_transforms")]
    pub transform_set: Vec<TransformId>,
    /// Defaults to `min(5, smallest auxiliary class count)`.
    #[serde(default)]
    pub k_prime: Option<usize>,
    #[serde(default)]
    pub rule: ErrorLabelRule,
    /// Share of detector-split images whose auxiliary scores validate.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn all_transforms() -> Vec<TransformId> {
    TransformId::ALL.to_vec()
}

/// Progress of the auxiliary loop, reported once per hold-out subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetEvent {
    pub index: usize,
    pub total: usize,
    pub held_out: Vec<i64>,
    /// False when the scores came from an existing checkpoint.
    pub trained: bool,
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassNoveltyReport {
    pub familiar_classes: Vec<i64>,
    pub novel_classes: Vec<i64>,
    pub subsets: Vec<Vec<i64>>,
    /// Auxiliary classifiers trained by this run (checkpoints excluded).
    pub auxiliary_trained: usize,
    pub k_prime: usize,
    pub training_examples: usize,
    pub result: NoveltyReport,
}

fn checkpoint_path(dir: &Path, held_out: &[i64]) -> PathBuf {
    let parts: Vec<String> = held_out.iter().map(i64::to_string).collect();
    dir.join(format!("subset_{}.csv", parts.join("_")))
}

fn relabel(images: &[&LabeledImage], classifier: &ToyClassifier) -> Vec<LabeledImage> {
    images
        .iter()
        .map(|img| LabeledImage {
            id: img.id.clone(),
            label: classifier.output_index(img.label).map_or(-1, |i| i as i64),
            image: img.image.clone(),
        })
        .collect()
}

/// Trains on the images whose class is in `classes`.
fn train_on(task: &ToyTask, classes: &[i64], config: &ToyClassifierConfig) -> Result<ToyClassifier> {
    let train: Vec<LabeledImage> = task.train.iter().filter(|i| classes.contains(&i.label)).cloned().collect();
    Ok(train_toy_classifier(&train, config)?)
}

/// Runs the hold-out procedure. With `checkpoints`, each subset's auxiliary
/// scores are stored there and reused by later runs.
pub fn run_class_novelty(
    task: &ToyTask,
    config: &ClassNoveltyConfig,
    checkpoints: Option<&Path>,
    progress: &mut dyn FnMut(&SubsetEvent),
) -> Result<ClassNoveltyReport> {
    check_fraction(config.validation_fraction)?;
    let mut all: Vec<i64> = task.train.iter().map(|i| i.label).collect();
    all.sort_unstable();
    all.dedup();
    let mut novel = config.novel_classes.clone();
    novel.sort_unstable();
    novel.dedup();
    if novel.len() != config.novel_classes.len() || novel.iter().any(|c| !all.contains(c)) {
        return Err(Error::Config(format!("novel classes {:?} must be distinct task classes", config.novel_classes)));
    }
    let familiar: Vec<i64> = all.iter().copied().filter(|c| !novel.contains(c)).collect();
    let s_n = novel.len();
    if s_n == 0 || s_n >= familiar.len() {
        return Err(Error::Config(format!("need 0 < S_N < {} familiar classes, got S_N = {s_n}", familiar.len())));
    }
    let subsets = combinations(&familiar, s_n);
    if subsets.is_empty() {
        return Err(Error::Config("no hold-out subsets".into()));
    }
    let aux_classes = familiar.len() - s_n;
    let kp = config.k_prime.unwrap_or(aux_classes.min(5));
    if kp == 0 || kp > aux_classes {
        return Err(Error::Config(format!("k' = {kp} must lie in 1..={aux_classes}")));
    }
    let set = &config.transform_set;
    let identity = [TransformId::Identity];
    if let Some(dir) = checkpoints {
        std::fs::create_dir_all(dir)?;
    }

    let familiar_detector: Vec<&LabeledImage> = task.detector.iter().filter(|i| familiar.contains(&i.label)).collect();
    let val_ids: HashSet<String> = familiar_detector
        .iter()
        .enumerate()
        .filter(|(i, _)| is_validation_position(*i, config.validation_fraction))
        .map(|(_, img)| img.id.clone())
        .collect();

    let mut train_all = LabeledFeatures::default();
    let mut val_all = LabeledFeatures::default();
    let mut train_id = LabeledFeatures::default();
    let mut val_id = LabeledFeatures::default();
    let mut auxiliary_trained = 0;
    for (index, held_out) in subsets.iter().enumerate() {
        let path = checkpoints.map(|d| checkpoint_path(d, held_out));
        let cached = match &path {
            Some(p) if p.exists() => Some(score_io::load_score_csv(p)?),
            _ => None,
        };
        let (table, train_accuracy) = match cached {
            Some(t) if t.transform_set() == set.as_slice() && t.k() == aux_classes => (t, None),
            _ => {
                let kept: Vec<i64> = familiar.iter().copied().filter(|c| !held_out.contains(c)).collect();
                let aux = train_on(task, &kept, &config.classifier)?;
                let table = score_images(&aux, &relabel(&familiar_detector, &aux), set, None, 1)?;
                if let Some(p) = &path {
                    score_io::save_score_csv(&table, p)?;
                }
                auxiliary_trained += 1;
                (table, Some(aux.train_accuracy))
            }
        };
        progress(&SubsetEvent {
            index,
            total: subsets.len(),
            held_out: held_out.clone(),
            trained: train_accuracy.is_some(),
            train_accuracy,
        });
        let train_part = table.filter(|id| !val_ids.contains(id));
        let val_part = table.filter(|id| val_ids.contains(id));
        let narrow = |t: &ScoreTable| t.select_transforms(&identity);
        train_all.extend(build_features(&train_part, None, config.rule, kp, LabelMode::Novelty)?);
        val_all.extend(build_features(&val_part, None, config.rule, kp, LabelMode::Novelty)?);
        train_id.extend(build_features(&narrow(&train_part)?, None, config.rule, kp, LabelMode::Novelty)?);
        val_id.extend(build_features(&narrow(&val_part)?, None, config.rule, kp, LabelMode::Novelty)?);
    }

    let mut cfg_all = config.detector.clone();
    cfg_all.input_dim = set.len() * kp;
    let model_all = detector::train(&cfg_all, &train_all, &val_all)?;
    let mut cfg_id = config.detector.clone();
    cfg_id.input_dim = kp;
    let model_id = detector::train(&cfg_id, &train_id, &val_id)?;

    // The deployed classifier on evaluation images of every class.
    let h = train_on(task, &familiar, &config.classifier)?;
    let eval: Vec<&LabeledImage> = task.eval.iter().collect();
    let eval_table = score_images(&h, &relabel(&eval, &h), set, None, 1)?;
    let labels = build_features(&eval_table, None, config.rule, kp, LabelMode::Novelty)?.labels;
    let eval_novel = eval.iter().filter(|i| novel.contains(&i.label)).count();

    let mut reports = evaluation::baseline_reports(&eval_table, &labels)?;
    reports.push(evaluation::report(
        MLP_IDENTITY_NAME,
        &evaluation::detector_scores(&model_id, &eval_table, &identity, kp)?,
        &labels,
    )?);
    reports.push(evaluation::report(
        MLP_ALL_NAME,
        &evaluation::detector_scores(&model_all, &eval_table, set, kp)?,
        &labels,
    )?);
    Ok(ClassNoveltyReport {
        familiar_classes: familiar,
        novel_classes: novel,
        subsets,
        auxiliary_trained,
        k_prime: kp,
        training_examples: train_all.len(),
        result: NoveltyReport {
            reports,
            eval_familiar: eval.len() - eval_novel,
            eval_novel,
            histories: vec![(MLP_IDENTITY_NAME.into(), model_id.history), (MLP_ALL_NAME.into(), model_all.history)],
        },
    })
}
