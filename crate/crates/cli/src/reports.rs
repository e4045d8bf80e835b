//! Report files. Every file is written to a temporary sibling first and then
//! renamed, so readers never see a half-written report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;

use invariance::detector::TrainingHistory;
use invariance::divergence::CorrelationMatrix;
use invariance::metrics::{write_cac_csv, write_roc_csv, write_summary_csv, DetectorReport};
use invariance::novelty::{ClassNoveltyReport, NoveltyReport, OodMode};

use crate::config::RunConfig;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// The resolved configuration every run directory carries.
pub fn write_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())
}

pub fn write_reports(dir: &Path, reports: &[DetectorReport]) -> anyhow::Result<()> {
    let mut summary = Vec::new();
    write_summary_csv(reports, &mut summary)?;
    write_atomic(&dir.join("summary.csv"), &summary)?;
    for r in reports {
        let mut roc = Vec::new();
        write_roc_csv(&r.roc, &mut roc)?;
        write_atomic(&dir.join(format!("roc_{}.csv", r.name)), &roc)?;
        let mut cac = Vec::new();
        write_cac_csv(&r.cac, &mut cac)?;
        write_atomic(&dir.join(format!("cac_{}.csv", r.name)), &cac)?;
    }
    Ok(())
}

pub fn write_correlation(path: &Path, matrix: &CorrelationMatrix) -> anyhow::Result<()> {
    let mut out = Vec::new();
    matrix.write_csv(&mut out)?;
    write_atomic(path, &out)
}

/// `epoch,train_loss,validation_auroc`, one row per epoch.
pub fn training_log_csv(history: &TrainingHistory) -> String {
    let mut s = String::from("epoch,train_loss,validation_auroc\n");
    for e in &history.epochs {
        let v = e.validation_metric.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, v);
    }
    s
}

pub fn mode_name(mode: OodMode) -> &'static str {
    match mode {
        OodMode::Plain => "plain",
        OodMode::CrossTrain => "cross_train",
    }
}

/// `mode,detector,auroc,aucac` over both OOD modes.
pub fn ood_summary_csv(results: &[(OodMode, NoveltyReport)]) -> String {
    let mut s = String::from("mode,detector,auroc,aucac\n");
    for (mode, report) in results {
        for r in &report.reports {
            let _ = writeln!(s, "{},{},{},{}", mode_name(*mode), r.name, r.auroc, r.aucac);
        }
    }
    s
}

fn class_set(classes: &[i64]) -> String {
    classes.iter().map(i64::to_string).collect::<Vec<_>>().join(" ")
}

/// `draw,novel_classes,detector,auroc,aucac`, then per-detector means with
/// draw `mean`.
pub fn class_novelty_summary_csv(reports: &[ClassNoveltyReport]) -> String {
    let mut s = String::from("draw,novel_classes,detector,auroc,aucac\n");
    for (i, rep) in reports.iter().enumerate() {
        for r in &rep.result.reports {
            let _ = writeln!(s, "{i},{},{},{},{}", class_set(&rep.novel_classes), r.name, r.auroc, r.aucac);
        }
    }
    for (name, auroc, aucac) in class_novelty_means(reports) {
        let _ = writeln!(s, "mean,,{name},{auroc},{aucac}");
    }
    s
}

/// Mean AUROC and AUCAC per detector name, in the order of the first draw.
pub fn class_novelty_means(reports: &[ClassNoveltyReport]) -> Vec<(String, f64, f64)> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    first
        .result
        .reports
        .iter()
        .map(|r| {
            let found: Vec<&DetectorReport> = reports.iter().filter_map(|rep| rep.result.get(&r.name)).collect();
            let n = found.len() as f64;
            let auroc = found.iter().map(|d| d.auroc).sum::<f64>() / n;
            let aucac = found.iter().map(|d| d.aucac).sum::<f64>() / n;
            (r.name.clone(), auroc, aucac)
        })
        .collect()
}

/// Per-subset log line of the class hold-out runs.
pub fn subset_log_header() -> &'static str {
    "draw,subset,total,held_out,trained,train_accuracy\n"
}

pub fn subset_log_line(draw: usize, e: &invariance::novelty::SubsetEvent) -> String {
    format!(
        "{draw},{},{},{},{},{}\n",
        e.index,
        e.total,
        class_set(&e.held_out),
        e.trained,
        e.train_accuracy.map_or_else(|| "NA".to_string(), |a| a.to_string())
    )
}
