use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use invariance::score_io::load_score_csv;

const SMALL: &str = r#"{
  "classes": 4,
  "sizes": {"train": 30, "detector": 40, "eval": 40},
  "classifier": {"pool": 4, "hidden_widths": [32], "epochs": 8, "batch_size": 64,
                 "learning_rate": 0.002, "rng_seed": 7},
  "class_novelty": {"novel_size": 1}
}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_invariance"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("small.json");
        fs::write(&config, SMALL).unwrap();
        Self { _tmp: tmp, root, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn cmd(&self, out: &str, args: &[&str]) -> Output {
        let out = self.path(out);
        let mut all = vec!["--config", p(&self.config), "--out", p(&out)];
        all.extend_from_slice(args);
        ok(&all)
    }

    /// toy -> transform -> score, returning the scores path.
    fn scored(&self, extra: &[&str]) -> PathBuf {
        self.cmd("toy", &["toy"]);
        self.cmd("tree", &["transform", "--input", p(&self.path("toy/images"))]);
        let c = self.path("toy/classifier.json");
        let m = self.path("tree/manifest.csv");
        let mut args = vec!["score", "--classifier", p(&c), "--manifest", p(&m)];
        args.extend_from_slice(extra);
        self.cmd("scores", &args);
        self.path("scores/scores.csv")
    }
}

fn count_files(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().is_file()).count()
}

#[test]
fn transform_writes_one_png_per_transform_and_is_idempotent() {
    let f = Fixture::new();
    f.cmd("toy", &["toy"]);
    let input = f.path("toy/images");
    let n = fs::read_dir(&input)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(n, 4 * 80);
    f.cmd("tree", &["transform", "--input", p(&input)]);
    let tree = f.path("tree");
    let names = ["identity", "horizontal_flip", "horizontal_blur3", "grayscale", "contrast_enhance", "gamma_correct"];
    let total: usize = names.iter().map(|t| count_files(&tree.join(t))).sum();
    assert_eq!(total, 6 * n);
    assert!(tree.join("config.json").exists());

    let id = "det-00003";
    let original = invariance::imageops::load_png(&input.join(format!("{id}.png"))).unwrap();
    let identity = invariance::imageops::load_png(&tree.join("identity").join(format!("{id}.png"))).unwrap();
    assert_eq!(original, identity);

    let before = fs::read(tree.join("grayscale").join(format!("{id}.png"))).unwrap();
    let manifest = fs::read(tree.join("manifest.csv")).unwrap();
    f.cmd("tree", &["transform", "--input", p(&input)]);
    assert_eq!(fs::read(tree.join("grayscale").join(format!("{id}.png"))).unwrap(), before);
    assert_eq!(fs::read(tree.join("manifest.csv")).unwrap(), manifest);
}

#[test]
fn transform_reports_unreadable_images() {
    let f = Fixture::new();
    let input = f.path("raw");
    fs::create_dir_all(&input).unwrap();
    fs::write(input.join("broken.png"), b"not a png").unwrap();
    let out = run(&["--out", p(&f.path("tree")), "transform", "--input", p(&input)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
}

#[test]
fn score_output_validates_and_copies_multiply_examples() {
    let f = Fixture::new();
    let scores = f.scored(&[]);
    let table = load_score_csv(&scores).unwrap();
    assert_eq!(table.len(), 4 * 80);
    assert_eq!(table.transform_set().len(), 6);
    let first = fs::read(&scores).unwrap();

    let c = f.path("toy/classifier.json");
    let m = f.path("tree/manifest.csv");
    f.cmd("scores", &["score", "--classifier", p(&c), "--manifest", p(&m)]);
    assert_eq!(fs::read(&scores).unwrap(), first);

    f.cmd("scores3", &["--copies", "3", "--augment-seed", "5", "score", "--classifier", p(&c), "--manifest", p(&m)]);
    let tripled = load_score_csv(&f.path("scores3/scores.csv")).unwrap();
    assert_eq!(tripled.len(), 3 * table.len());
}

#[test]
fn detector_training_and_evaluation() {
    let f = Fixture::new();
    let scores = f.scored(&[]);
    let splits = f.path("toy/splits");
    f.cmd("det", &["train-detector", "--scores", p(&scores), "--splits", p(&splits)]);
    let log = fs::read_to_string(f.path("det/training_log_mlp_all.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,validation_auroc"));
    assert!(lines.all(|l| l.split(',').nth(2).is_some_and(|v| v.parse::<f64>().is_ok())));

    let models = [f.path("det/mlp_identity.json"), f.path("det/mlp_all.json")];
    let eval = |out: &str| {
        f.cmd(
            out,
            &[
                "eval",
                "--scores",
                p(&scores),
                "--splits",
                p(&splits),
                "--model",
                p(&models[0]),
                "--model",
                p(&models[1]),
            ],
        );
        fs::read_to_string(f.path(out).join("summary.csv")).unwrap()
    };
    let summary = eval("eval");
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "msr",
            "kl_horizontal_flip",
            "kl_horizontal_blur3",
            "kl_grayscale",
            "kl_contrast_enhance",
            "kl_gamma_correct",
            "mlp_identity",
            "mlp_all"
        ]
    );
    for r in &rows {
        let auroc: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auroc));
    }
    assert_eq!(eval("eval2"), summary);
    assert!(f.path("eval/roc_mlp_all.csv").exists() && f.path("eval/correlation_kl.csv").exists());
}

#[test]
fn single_class_labels_fail_validation() {
    let f = Fixture::new();
    let dir = f.path("data");
    fs::create_dir_all(dir.join("splits")).unwrap();
    let mut csv = String::from("example_id,transform,true_label,logit_0,logit_1\n");
    for i in 0..20 {
        for t in ["identity", "horizontal_flip"] {
            csv.push_str(&format!("e{i},{t},0,{}.5,0.0\n", i + 1));
        }
    }
    fs::write(dir.join("scores.csv"), csv).unwrap();
    let ids = |r: std::ops::Range<i32>| r.map(|i| format!("e{i}\n")).collect::<String>();
    fs::write(dir.join("splits/detector_train.txt"), ids(0..10)).unwrap();
    fs::write(dir.join("splits/detector_val.txt"), ids(10..15)).unwrap();
    fs::write(dir.join("splits/eval.txt"), ids(15..20)).unwrap();
    let out = run(&[
        "--out",
        p(&f.path("det")),
        "--transforms",
        "identity,horizontal_flip",
        "train-detector",
        "--scores",
        p(&dir.join("scores.csv")),
        "--splits",
        p(&dir.join("splits")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_configs_exit_one() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    fs::write(&bad, r#"{"seeds": 3}"#).unwrap();
    assert_eq!(run(&["--config", p(&bad), "--out", p(&f.path("x")), "toy"]).status.code(), Some(1));
    assert_eq!(run(&["--out", p(&f.path("x")), "--transforms", "grayscale", "toy"]).status.code(), Some(1));
    assert_eq!(run(&["--seed", "nope", "toy"]).status.code(), Some(1));
    assert_eq!(run(&["toy"]).status.code(), Some(1));
}

#[test]
fn class_novelty_logs_every_auxiliary_training_and_resumes() {
    let f = Fixture::new();
    let cfg = f.path("cn.json");
    fs::write(
        &cfg,
        r#"{"sizes": {"train": 8, "detector": 8, "eval": 8},
            "classifier": {"pool": 4, "hidden_widths": [16], "epochs": 3, "batch_size": 64,
                           "learning_rate": 0.002, "rng_seed": 7},
            "detector": {"max_epochs": 3},
            "class_novelty": {"novel_classes": [[3, 7]], "images_per_class": 8}}"#,
    )
    .unwrap();
    let out = f.path("cn");
    ok(&["--config", p(&cfg), "--out", p(&out), "novelty", "--experiment", "classes"]);
    let log = fs::read_to_string(out.join("subsets.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 28);
    assert!(rows.iter().all(|r| r.split(',').nth(4) == Some("true")));
    let summary = fs::read(out.join("summary.csv")).unwrap();
    assert_eq!(count_files(&out.join("checkpoints/draw_0")), 28);

    ok(&["--config", p(&cfg), "--out", p(&out), "novelty", "--experiment", "classes"]);
    let log = fs::read_to_string(out.join("subsets.csv")).unwrap();
    assert!(log.lines().skip(1).all(|r| r.split(',').nth(4) == Some("false")));
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), summary);
}
