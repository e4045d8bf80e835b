//! Score tables: the interchange format tying every (example, transform) pair
//! to the classifier's logits, plus split manifests.
//!
//! CSV schema, one row per (example, transform):
//!
//! ```text
//! example_id,transform,true_label,logit_0,...,logit_{k-1}
//! ```
//!
//! `transform` is the canonical transform name, `true_label` is `-1` when
//! unknown, floats are written as shortest round-trip decimals. UTF-8, LF.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blackbox::{BlackBoxClassifier, BlackBoxError, LabeledImage};
use crate::imageops::{self, AugmentationConfig, ImageError, TransformId};

#[derive(Debug, thiserror::Error)]
pub enum ScoreIoError {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("conflicting example id {0:?}")]
    Conflict(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Classifier(#[from] BlackBoxError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// All logit rows of one example, in the table's transform order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleScores {
    /// Ground-truth class index, `-1` when unknown.
    pub true_label: i64,
    pub logits: Vec<Vec<f64>>,
}

/// One (example, transform) row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub example_id: String,
    pub transform: TransformId,
    pub true_label: i64,
    pub logits: Vec<f64>,
}

/// A complete grid of logits: every example has a row for every transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    k: usize,
    transform_set: Vec<TransformId>,
    examples: IndexMap<String, ExampleScores>,
}

fn validate_transform_set(set: &[TransformId]) -> Result<(), ScoreIoError> {
    imageops::validate_transform_set(set)?;
    if set[0] != TransformId::Identity {
        return Err(ScoreIoError::Schema("the transform set must start with identity".into()));
    }
    Ok(())
}

impl ScoreTable {
    pub fn new(k: usize, transform_set: Vec<TransformId>) -> Result<Self, ScoreIoError> {
        if k == 0 {
            return Err(ScoreIoError::Schema("class count must be positive".into()));
        }
        validate_transform_set(&transform_set)?;
        Ok(Self { k, transform_set, examples: IndexMap::new() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn transform_set(&self) -> &[TransformId] {
        &self.transform_set
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example_ids(&self) -> impl Iterator<Item = &str> {
        self.examples.keys().map(String::as_str)
    }

    pub fn get(&self, example_id: &str) -> Option<&ExampleScores> {
        self.examples.get(example_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ExampleScores)> {
        self.examples.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn transform_index(&self, t: TransformId) -> Option<usize> {
        self.transform_set.iter().position(|&x| x == t)
    }

    /// Logits of one (example, transform) cell.
    pub fn logits(&self, example_id: &str, t: TransformId) -> Result<&[f64], ScoreIoError> {
        let ex = self
            .examples
            .get(example_id)
            .ok_or_else(|| ScoreIoError::IncompleteGrid(format!("no rows for example {example_id:?}")))?;
        let idx =
            self.transform_index(t).ok_or_else(|| ScoreIoError::IncompleteGrid(format!("table has no {t} rows")))?;
        Ok(&ex.logits[idx])
    }

    /// Adds a complete example (one row per transform, in table order).
    pub fn insert(&mut self, example_id: String, scores: ExampleScores) -> Result<(), ScoreIoError> {
        if scores.logits.len() != self.transform_set.len() {
            return Err(ScoreIoError::IncompleteGrid(format!(
                "example {example_id:?} has {} rows, the table needs {}",
                scores.logits.len(),
                self.transform_set.len()
            )));
        }
        for row in &scores.logits {
            if row.len() != self.k {
                return Err(ScoreIoError::Schema(format!(
                    "example {example_id:?} has {} logits, the table needs {}",
                    row.len(),
                    self.k
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ScoreIoError::InvalidArgument(format!("example {example_id:?} has non-finite logits")));
            }
        }
        if scores.true_label < -1 || scores.true_label >= self.k as i64 {
            return Err(ScoreIoError::InvalidArgument(format!(
                "example {example_id:?} has label {} outside -1..{}",
                scores.true_label, self.k
            )));
        }
        if self.examples.contains_key(&example_id) {
            return Err(ScoreIoError::Conflict(example_id));
        }
        self.examples.insert(example_id, scores);
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = ScoreRecord> + '_ {
        self.examples.iter().flat_map(move |(id, ex)| {
            self.transform_set.iter().zip(&ex.logits).map(move |(&t, logits)| ScoreRecord {
                example_id: id.clone(),
                transform: t,
                true_label: ex.true_label,
                logits: logits.clone(),
            })
        })
    }

    /// A table restricted to the given transforms (Identity must be kept).
    pub fn select_transforms(&self, set: &[TransformId]) -> Result<ScoreTable, ScoreIoError> {
        validate_transform_set(set)?;
        let idx: Vec<usize> = set
            .iter()
            .map(|&t| {
                self.transform_index(t).ok_or_else(|| ScoreIoError::IncompleteGrid(format!("table has no {t} rows")))
            })
            .collect::<Result<_, _>>()?;
        let mut out = ScoreTable::new(self.k, set.to_vec())?;
        for (id, ex) in &self.examples {
            out.examples.insert(
                id.clone(),
                ExampleScores {
                    true_label: ex.true_label,
                    logits: idx.iter().map(|&i| ex.logits[i].clone()).collect(),
                },
            );
        }
        Ok(out)
    }

    /// A table holding only examples whose id satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> ScoreTable {
        ScoreTable {
            k: self.k,
            transform_set: self.transform_set.clone(),
            examples: self
                .examples
                .iter()
                .filter(|(id, _)| keep(id))
                .map(|(id, ex)| (id.clone(), ex.clone()))
                .collect(),
        }
    }

    /// Relabels every example (e.g. to mark a whole table as novel).
    pub fn with_labels(&self, mut label: impl FnMut(&str, i64) -> i64) -> Result<ScoreTable, ScoreIoError> {
        let mut out = ScoreTable::new(self.k, self.transform_set.clone())?;
        for (id, ex) in &self.examples {
            out.insert(id.clone(), ExampleScores { true_label: label(id, ex.true_label), logits: ex.logits.clone() })?;
        }
        Ok(out)
    }
}

fn format_float(v: f64) -> String {
    // Debug prints the shortest decimal that round-trips, switching to
    // exponent notation for very large and very small magnitudes.
    format!("{v:?}")
}

pub fn write_score_csv<W: Write>(table: &ScoreTable, out: W) -> Result<(), ScoreIoError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["example_id".to_string(), "transform".into(), "true_label".into()];
    header.extend((0..table.k).map(|i| format!("logit_{i}")));
    w.write_record(&header)?;
    for (id, ex) in &table.examples {
        for (t, logits) in table.transform_set.iter().zip(&ex.logits) {
            let mut row = vec![id.clone(), t.name().to_string(), ex.true_label.to_string()];
            row.extend(logits.iter().map(|&v| format_float(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_csv<R: Read>(input: R) -> Result<ScoreTable, ScoreIoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    let expected = ["example_id", "transform", "true_label"];
    for (i, name) in expected.iter().enumerate() {
        if header.get(i) != Some(*name) {
            return Err(ScoreIoError::Parse { row: 1, message: format!("missing column {name:?} at position {i}") });
        }
    }
    let k = header.len() - expected.len();
    if k == 0 {
        return Err(ScoreIoError::Parse { row: 1, message: "no logit columns".into() });
    }
    for i in 0..k {
        let name = &header[expected.len() + i];
        if name != format!("logit_{i}") {
            return Err(ScoreIoError::Parse { row: 1, message: format!("expected column logit_{i}, found {name:?}") });
        }
    }

    // Rows grouped by example, in first-appearance order.
    type Rows = Vec<(TransformId, Vec<f64>, usize)>;
    let mut grouped: IndexMap<String, (i64, Rows)> = IndexMap::new();
    let mut transforms_seen: Vec<TransformId> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(ScoreIoError::Parse {
                row,
                message: format!("ragged row: {} logits, header declares {k}", record.len().saturating_sub(3)),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(ScoreIoError::Parse { row, message: "empty example_id".into() });
        }
        let transform: TransformId = record[1]
            .parse()
            .map_err(|_| ScoreIoError::Parse { row, message: format!("unknown transform {:?}", &record[1]) })?;
        let label: i64 = record[2]
            .parse()
            .map_err(|_| ScoreIoError::Parse { row, message: format!("invalid true_label {:?}", &record[2]) })?;
        if label < -1 || label >= k as i64 {
            return Err(ScoreIoError::Parse { row, message: format!("true_label {label} outside -1..{k}") });
        }
        let mut logits = Vec::with_capacity(k);
        for j in 0..k {
            let v: f64 = record[3 + j].parse().map_err(|_| ScoreIoError::Parse {
                row,
                message: format!("invalid float {:?} in logit_{j}", &record[3 + j]),
            })?;
            if !v.is_finite() {
                return Err(ScoreIoError::Parse { row, message: format!("non-finite logit_{j}") });
            }
            logits.push(v);
        }
        if !transforms_seen.contains(&transform) {
            transforms_seen.push(transform);
        }
        let entry = grouped.entry(id.clone()).or_insert_with(|| (label, Vec::new()));
        if entry.0 != label {
            return Err(ScoreIoError::Parse {
                row,
                message: format!("example {id:?} has conflicting labels {} and {label}", entry.0),
            });
        }
        if entry.1.iter().any(|(t, _, _)| *t == transform) {
            return Err(ScoreIoError::Parse { row, message: format!("duplicate {transform} row for example {id:?}") });
        }
        entry.1.push((transform, logits, row));
    }

    if grouped.is_empty() {
        return Err(ScoreIoError::Parse { row: 1, message: "no data rows".into() });
    }
    let transform_set = transforms_seen;
    validate_transform_set(&transform_set)?;
    let mut table = ScoreTable::new(k, transform_set.clone())?;
    for (id, (label, rows)) in grouped {
        let first_row = rows[0].2;
        let mut logits = Vec::with_capacity(transform_set.len());
        for t in &transform_set {
            match rows.iter().find(|(rt, _, _)| rt == t) {
                Some((_, l, _)) => logits.push(l.clone()),
                None => {
                    return Err(ScoreIoError::IncompleteGrid(format!(
                        "example {id:?} (first seen on row {first_row}) has no {t} row"
                    )))
                }
            }
        }
        table.insert(id, ExampleScores { true_label: label, logits })?;
    }
    Ok(table)
}

pub fn save_score_csv(table: &ScoreTable, path: &Path) -> Result<(), ScoreIoError> {
    let mut buf = Vec::new();
    write_score_csv(table, &mut buf)?;
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_score_csv(path: &Path) -> Result<ScoreTable, ScoreIoError> {
    read_score_csv(fs::File::open(path)?)
}

/// Union of two tables with identical schema and disjoint example ids.
pub fn merge_tables(a: &ScoreTable, b: &ScoreTable) -> Result<ScoreTable, ScoreIoError> {
    if a.k != b.k {
        return Err(ScoreIoError::Schema(format!("class counts differ: {} vs {}", a.k, b.k)));
    }
    if a.transform_set != b.transform_set {
        return Err(ScoreIoError::Schema("transform sets differ".into()));
    }
    let mut out = a.clone();
    for (id, ex) in &b.examples {
        out.insert(id.clone(), ex.clone())?;
    }
    Ok(out)
}

/// Named, pairwise disjoint lists of base example ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitManifest {
    pub detector_train: Vec<String>,
    pub detector_val: Vec<String>,
    pub eval: Vec<String>,
}

pub const SPLIT_FILES: [&str; 3] = ["detector_train.txt", "detector_val.txt", "eval.txt"];

impl SplitManifest {
    pub fn new(
        detector_train: Vec<String>,
        detector_val: Vec<String>,
        eval: Vec<String>,
    ) -> Result<Self, ScoreIoError> {
        let m = Self { detector_train, detector_val, eval };
        m.validate()?;
        Ok(m)
    }

    /// Splits detector ids into training and validation lists, sending an
    /// evenly spread `val_fraction` of them to validation.
    pub fn partition(detector_ids: &[String], eval: Vec<String>, val_fraction: f64) -> Result<Self, ScoreIoError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(ScoreIoError::InvalidArgument(format!(
                "validation fraction must lie in (0, 1), got {val_fraction}"
            )));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, id) in detector_ids.iter().enumerate() {
            if is_validation_position(i, val_fraction) {
                val.push(id.clone());
            } else {
                train.push(id.clone());
            }
        }
        Self::new(train, val, eval)
    }

    pub fn validate(&self) -> Result<(), ScoreIoError> {
        let mut seen = HashSet::new();
        for id in self.detector_train.iter().chain(&self.detector_val).chain(&self.eval) {
            if !seen.insert(id.as_str()) {
                return Err(ScoreIoError::Conflict(id.clone()));
            }
        }
        Ok(())
    }

    /// Writes `detector_train.txt`, `detector_val.txt` and `eval.txt`, one id
    /// per line, into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ScoreIoError> {
        fs::create_dir_all(dir)?;
        for (name, ids) in SPLIT_FILES.iter().zip([&self.detector_train, &self.detector_val, &self.eval]) {
            let mut text = String::new();
            for id in ids {
                text.push_str(id);
                text.push('\n');
            }
            fs::write(dir.join(name), text)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ScoreIoError> {
        let read = |name: &str| -> Result<Vec<String>, ScoreIoError> {
            Ok(fs::read_to_string(dir.join(name))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        };
        Self::new(read(SPLIT_FILES[0])?, read(SPLIT_FILES[1])?, read(SPLIT_FILES[2])?)
    }
}

/// True for an evenly spread `fraction` of positions `0, 1, 2, ...`.
pub fn is_validation_position(index: usize, fraction: f64) -> bool {
    (index as f64 * fraction).floor() != ((index + 1) as f64 * fraction).floor()
}

/// Base id of an augmented copy (`"id#c"` -> `"id"`).
pub fn base_id(example_id: &str) -> &str {
    match example_id.rfind('#') {
        Some(pos) => &example_id[..pos],
        None => example_id,
    }
}

/// Scores every image under every transform. With augmentation or
/// `copies > 1`, each image yields `copies` augmented variants with ids
/// `"id#c"`; the fixed transforms are applied to each augmented variant.
///
/// Augmentation draws for image `i` come from an independent stream seeded by
/// `(cfg.rng_seed, i)`.
pub fn score_images<C: BlackBoxClassifier + ?Sized>(
    classifier: &C,
    images: &[LabeledImage],
    transform_set: &[TransformId],
    augmentation: Option<&AugmentationConfig>,
    copies: usize,
) -> Result<ScoreTable, ScoreIoError> {
    if copies == 0 {
        return Err(ScoreIoError::InvalidArgument("copies must be at least 1".into()));
    }
    let k = classifier.class_count();
    let mut table = ScoreTable::new(k, transform_set.to_vec())?;
    let derive_ids = augmentation.is_some() || copies > 1;
    for (i, img) in images.iter().enumerate() {
        let mut rng = augmentation.map(|cfg| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            r.set_stream(i as u64);
            r
        });
        for c in 0..copies {
            let variant = match (augmentation, rng.as_mut()) {
                (Some(cfg), Some(rng)) => imageops::augment(&img.image, cfg, rng)?,
                _ => img.image.clone(),
            };
            let mut logits = Vec::with_capacity(transform_set.len());
            for &t in transform_set {
                let transformed = imageops::apply_transform(&variant, t)?;
                let s = classifier.score(&transformed)?;
                if s.len() != k {
                    return Err(ScoreIoError::Schema(format!(
                        "classifier returned {} logits, declared {k} classes",
                        s.len()
                    )));
                }
                logits.push(s);
            }
            let id = if derive_ids { format!("{}#{c}", img.id) } else { img.id.clone() };
            table.insert(id, ExampleScores { true_label: img.label, logits })?;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::ImageTensor;
    use proptest::prelude::*;

    fn small_table() -> ScoreTable {
        let mut t = ScoreTable::new(3, vec![TransformId::Identity, TransformId::HorizontalFlip]).unwrap();
        t.insert(
            "a".into(),
            ExampleScores { true_label: 0, logits: vec![vec![1.0, 2.5, -0.1], vec![0.3, 0.1, 1e-300]] },
        )
        .unwrap();
        t.insert(
            "b".into(),
            ExampleScores { true_label: -1, logits: vec![vec![0.1 + 0.2, -7.0, 3.0], vec![1.0 / 3.0, 2.0, 5.0]] },
        )
        .unwrap();
        t
    }

    fn to_csv(t: &ScoreTable) -> String {
        let mut buf = Vec::new();
        write_score_csv(t, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn csv_layout_is_exact() {
        let text = to_csv(&small_table());
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("example_id,transform,true_label,logit_0,logit_1,logit_2"));
        assert_eq!(lines.next(), Some("a,identity,0,1.0,2.5,-0.1"));
        assert_eq!(lines.next(), Some("a,horizontal_flip,0,0.3,0.1,1e-300"));
        assert_eq!(lines.next(), Some("b,identity,-1,0.30000000000000004,-7.0,3.0"));
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let text = "example_id,transform,true_label,logit_0\n\
                    a,identity,0,1\n\
                    a,horizontal_flip,0,2\n\
                    b,identity,0,3\n";
        assert!(matches!(read_score_csv(text.as_bytes()), Err(ScoreIoError::IncompleteGrid(_))));
    }

    #[test]
    fn ragged_row_names_its_row() {
        let text = "example_id,transform,true_label,logit_0,logit_1,logit_2\n\
                    a,identity,0,1,2,3\n\
                    b,identity,0,1,2,3,4\n";
        match read_score_csv(text.as_bytes()) {
            Err(ScoreIoError::Parse { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("ragged"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let missing = "example_id,true_label,logit_0\na,0,1\n";
        assert!(matches!(read_score_csv(missing.as_bytes()), Err(ScoreIoError::Parse { row: 1, .. })));
        let unknown = "example_id,transform,true_label,logit_0\na,sharpen,0,1\n";
        assert!(matches!(read_score_csv(unknown.as_bytes()), Err(ScoreIoError::Parse { row: 2, .. })));
        let dup = "example_id,transform,true_label,logit_0\na,identity,0,1\na,identity,0,1\n";
        assert!(matches!(read_score_csv(dup.as_bytes()), Err(ScoreIoError::Parse { row: 3, .. })));
        let no_identity = "example_id,transform,true_label,logit_0\na,grayscale,0,1\n";
        assert!(read_score_csv(no_identity.as_bytes()).is_err());
        let bad_label = "example_id,transform,true_label,logit_0,logit_1\na,identity,2,1,0\n";
        assert!(read_score_csv(bad_label.as_bytes()).is_err());
    }

    #[test]
    fn merge_semantics() {
        let t = small_table();
        let empty = ScoreTable::new(3, t.transform_set().to_vec()).unwrap();
        assert_eq!(merge_tables(&t, &empty).unwrap(), t);
        let renamed = t.with_labels(|_, l| l).unwrap().filter(|_| true);
        assert!(matches!(merge_tables(&t, &renamed), Err(ScoreIoError::Conflict(_))));
        let mut other = ScoreTable::new(3, t.transform_set().to_vec()).unwrap();
        other.insert("c".into(), ExampleScores { true_label: 1, logits: vec![vec![0.0; 3]; 2] }).unwrap();
        assert_eq!(merge_tables(&t, &other).unwrap().len(), 3);
        let narrow = ScoreTable::new(2, t.transform_set().to_vec()).unwrap();
        assert!(matches!(merge_tables(&t, &narrow), Err(ScoreIoError::Schema(_))));
    }

    #[test]
    fn manifest_round_trip_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let m = SplitManifest::new(vec!["a".into()], vec!["b".into()], vec!["c".into(), "d".into()]).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(SplitManifest::load(dir.path()).unwrap(), m);
        assert!(SplitManifest::new(vec!["a".into()], vec!["a".into()], vec![]).is_err());

        let ids: Vec<String> = (0..10).map(|i| format!("d{i}")).collect();
        let p = SplitManifest::partition(&ids, vec!["e".into()], 0.2).unwrap();
        assert_eq!(p.detector_val.len(), 2);
        assert_eq!(p.detector_train.len(), 8);
        assert!(SplitManifest::partition(&ids, vec![], 1.0).is_err());
    }

    #[test]
    fn base_ids() {
        assert_eq!(base_id("x-1#3"), "x-1");
        assert_eq!(base_id("plain"), "plain");
    }

    struct Sum;
    impl BlackBoxClassifier for Sum {
        fn class_count(&self) -> usize {
            2
        }
        fn score(&self, image: &ImageTensor) -> Result<Vec<f64>, BlackBoxError> {
            let s: f64 = image.pixels().iter().sum();
            Ok(vec![s, image.get(0, 0, 0)])
        }
    }

    fn images(n: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| LabeledImage {
                id: format!("img{i}"),
                label: (i % 2) as i64,
                image: ImageTensor::new(2, 2, 3, (0..12).map(|j| ((i + j) % 7) as f64 / 7.0).collect()).unwrap(),
            })
            .collect()
    }

    #[test]
    fn score_images_grid() {
        let imgs = images(4);
        let t = score_images(&Sum, &imgs, &TransformId::ALL, None, 1).unwrap();
        assert_eq!(t.records().count(), 6 * 4);
        assert_eq!(t.logits("img2", TransformId::Identity).unwrap(), Sum.score(&imgs[2].image).unwrap().as_slice());

        let aug = AugmentationConfig::default();
        let a = score_images(&Sum, &imgs, &TransformId::ALL, Some(&aug), 3).unwrap();
        let b = score_images(&Sum, &imgs, &TransformId::ALL, Some(&aug), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.get("img0#2").is_some());
        assert!(score_images(&Sum, &imgs, &[TransformId::Grayscale], None, 1).is_err());
    }

    fn arb_table() -> impl Strategy<Value = ScoreTable> {
        (1usize..5, 1usize..4, 1usize..6).prop_flat_map(|(k, m, n)| {
            let set: Vec<TransformId> = TransformId::ALL[..m].to_vec();
            proptest::collection::vec(
                (
                    -1i64..k as i64,
                    proptest::collection::vec(
                        proptest::collection::vec(
                            proptest::num::f64::NORMAL | proptest::num::f64::ZERO | proptest::num::f64::SUBNORMAL,
                            k,
                        ),
                        m,
                    ),
                ),
                n,
            )
            .prop_map(move |rows| {
                let mut t = ScoreTable::new(k, set.clone()).unwrap();
                for (i, (label, logits)) in rows.into_iter().enumerate() {
                    t.insert(format!("e{i}"), ExampleScores { true_label: label, logits }).unwrap();
                }
                t
            })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bitwise(t in arb_table()) {
            let text = to_csv(&t);
            let back = read_score_csv(text.as_bytes()).unwrap();
            prop_assert_eq!(back.k(), t.k());
            prop_assert_eq!(back.transform_set(), t.transform_set());
            for ((ia, ea), (ib, eb)) in t.iter().zip(back.iter()) {
                prop_assert_eq!(ia, ib);
                prop_assert_eq!(ea.true_label, eb.true_label);
                for (ra, rb) in ea.logits.iter().zip(&eb.logits) {
                    prop_assert_eq!(ra.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), rb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                }
            }
        }
    }
}
