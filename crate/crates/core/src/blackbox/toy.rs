//! Deterministic synthetic image task and a small trainable classifier for
//! desk-scale end-to-end runs.
//!
//! Images are 32x32 RGB. The familiar domain draws one colored geometric
//! shape per image over a tinted gradient background with pixel noise; the
//! class fixes the shape and a base hue. Two further domains with disjoint
//! grammars (stripe textures, soft blob fields) serve as novel inputs.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{predict_class, BlackBoxClassifier, BlackBoxError, LabeledImage};
use crate::detector::network::{Architecture, BatchNormConfig, BlockOrder, Network, OutputHead};
use crate::detector::persist::{self, NetworkRecord};
use crate::detector::train::{fit, FitOptions, OptimizerConfig, OwnedTargets, TrainingHistory};
use crate::imageops::{augment, AugmentationConfig, ImageTensor};

pub const TOY_SIDE: usize = 32;

/// Image grammar of a synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDomain {
    /// Class-dependent shapes; the familiar domain.
    Shapes,
    /// Oriented stripe and checker textures.
    Stripes,
    /// Smooth fields of overlapping soft blobs.
    Blobs,
}

impl ToyDomain {
    fn code(self) -> u64 {
        match self {
            ToyDomain::Shapes => 0,
            ToyDomain::Stripes => 1,
            ToyDomain::Blobs => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyDomain::Shapes => "shapes",
            ToyDomain::Stripes => "stripes",
            ToyDomain::Blobs => "blobs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    TriangleUp,
    Ring,
    Cross,
    HorizontalBar,
    VerticalBar,
    Diamond,
    TriangleDown,
    Frame,
}

const SHAPES: [Shape; 10] = [
    Shape::Disk,
    Shape::Square,
    Shape::TriangleUp,
    Shape::Ring,
    Shape::Cross,
    Shape::HorizontalBar,
    Shape::VerticalBar,
    Shape::Diamond,
    Shape::TriangleDown,
    Shape::Frame,
];

impl Shape {
    /// Whether the point at offset `(dx, dy)` from the center (in units of
    /// the radius) is inside the shape.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= 1.0,
            Shape::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            Shape::TriangleUp => (-0.9..=0.8).contains(&dy) && dx.abs() <= (dy + 0.9) * 0.6,
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.4..=1.0).contains(&r2)
            }
            Shape::Cross => (dx.abs() <= 0.25 && dy.abs() <= 1.0) || (dy.abs() <= 0.25 && dx.abs() <= 1.0),
            Shape::HorizontalBar => dx.abs() <= 1.0 && dy.abs() <= 0.3,
            Shape::VerticalBar => dy.abs() <= 1.0 && dx.abs() <= 0.3,
            Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
            Shape::TriangleDown => (-0.8..=0.9).contains(&dy) && dx.abs() <= (0.9 - dy) * 0.6,
            Shape::Frame => {
                let m = dx.abs().max(dy.abs());
                (0.55..=0.9).contains(&m)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rendering knobs for the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRenderConfig {
    /// Standard deviation of the additive Gaussian pixel noise.
    pub pixel_noise: f64,
    /// Standard deviation of the hue jitter (in turns).
    pub hue_jitter: f64,
    /// Probability of drawing a distractor patch.
    pub distractor_probability: f64,
}

impl Default for ToyRenderConfig {
    fn default() -> Self {
        Self { pixel_noise: 0.12, hue_jitter: 0.07, distractor_probability: 0.5 }
    }
}

/// Renders image `index` of `split` for the given class and domain. Pure in
/// its arguments.
pub fn render_toy_image(
    seed: u64,
    domain: ToyDomain,
    split: u64,
    index: u64,
    class: usize,
    render: &ToyRenderConfig,
) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain.code() << 56) | (split << 48) | index);
    let side = TOY_SIDE;
    let mut px = vec![0.0; side * side * 3];

    // Tinted gradient background.
    let level = rng.random_range(0.25..0.6);
    let tint: [f64; 3] = [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)];
    let angle = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.0..0.15);
    for r in 0..side {
        for c in 0..side {
            let u =
                (c as f64 / (side - 1) as f64 - 0.5) * angle.cos() + (r as f64 / (side - 1) as f64 - 0.5) * angle.sin();
            for ch in 0..3 {
                px[(r * side + c) * 3 + ch] = level + tint[ch] + amp * u;
            }
        }
    }

    match domain {
        ToyDomain::Shapes => draw_shape(&mut px, &mut rng, class, render),
        ToyDomain::Stripes => draw_stripes(&mut px, &mut rng),
        ToyDomain::Blobs => draw_blobs(&mut px, &mut rng),
    }

    if rng.random::<f64>() < render.distractor_probability {
        let w = rng.random_range(3..8);
        let h = rng.random_range(3..8);
        let r0 = rng.random_range(0..side - h);
        let c0 = rng.random_range(0..side - w);
        let color = hsv_to_rgb(rng.random(), rng.random_range(0.2..0.9), rng.random_range(0.3..1.0));
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                for ch in 0..3 {
                    px[(r * side + c) * 3 + ch] = color[ch];
                }
            }
        }
    }

    let noise = Normal::new(0.0, render.pixel_noise.max(0.0)).expect("finite noise level");
    for p in px.iter_mut() {
        *p += noise.sample(&mut rng);
    }
    ImageTensor::from_clamped(side, side, 3, px).expect("rendered pixels are finite")
}

fn draw_shape<R: Rng>(px: &mut [f64], rng: &mut R, class: usize, render: &ToyRenderConfig) {
    let side = TOY_SIDE as f64;
    let shape = SHAPES[class % SHAPES.len()];
    // Neighbouring classes sit close on the hue wheel so color alone is
    // ambiguous.
    let base_hue = (class as f64 * 0.37).rem_euclid(1.0);
    let hue = base_hue + Normal::new(0.0, render.hue_jitter).unwrap().sample(rng);
    let color = hsv_to_rgb(hue, rng.random_range(0.45..0.95), rng.random_range(0.55..1.0));
    let radius = rng.random_range(5.0..10.0);
    let cx = rng.random_range(radius + 1.0..side - radius - 1.0);
    let cy = rng.random_range(radius + 1.0..side - radius - 1.0);
    let tilt = rng.random_range(-0.35..0.35f64);
    let (sin, cos) = tilt.sin_cos();
    for r in 0..TOY_SIDE {
        for c in 0..TOY_SIDE {
            let x = (c as f64 + 0.5 - cx) / radius;
            let y = (r as f64 + 0.5 - cy) / radius;
            let (dx, dy) = (cos * x + sin * y, -sin * x + cos * y);
            if shape.contains(dx, dy) {
                let i = (r * TOY_SIDE + c) * 3;
                px[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

fn draw_stripes<R: Rng>(px: &mut [f64], rng: &mut R) {
    let a = hsv_to_rgb(rng.random(), rng.random_range(0.3..1.0), rng.random_range(0.5..1.0));
    let b = hsv_to_rgb(rng.random(), rng.random_range(0.3..1.0), rng.random_range(0.1..0.6));
    let period = rng.random_range(3.0..9.0);
    let angle = rng.random_range(0.0..PI);
    let checker = rng.random::<f64>() < 0.4;
    for r in 0..TOY_SIDE {
        for c in 0..TOY_SIDE {
            let u = c as f64 * angle.cos() + r as f64 * angle.sin();
            let v = -(c as f64) * angle.sin() + r as f64 * angle.cos();
            let mut on = (u / period).floor() as i64 % 2 == 0;
            if checker {
                on ^= (v / period).floor() as i64 % 2 == 0;
            }
            let i = (r * TOY_SIDE + c) * 3;
            px[i..i + 3].copy_from_slice(if on { &a } else { &b });
        }
    }
}

fn draw_blobs<R: Rng>(px: &mut [f64], rng: &mut R) {
    let count = rng.random_range(3..7);
    for _ in 0..count {
        let color = hsv_to_rgb(rng.random(), rng.random_range(0.2..0.8), rng.random_range(0.3..1.0));
        let cx = rng.random_range(0.0..TOY_SIDE as f64);
        let cy = rng.random_range(0.0..TOY_SIDE as f64);
        let sigma = rng.random_range(3.0..9.0);
        for r in 0..TOY_SIDE {
            for c in 0..TOY_SIDE {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                let i = (r * TOY_SIDE + c) * 3;
                for ch in 0..3 {
                    px[i + ch] = px[i + ch] * (1.0 - w) + color[ch] * w;
                }
            }
        }
    }
}

/// The three disjoint splits of a toy task.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub seed: u64,
    pub classes: usize,
    /// Trains the classifier.
    pub train: Vec<LabeledImage>,
    /// Unseen by the classifier; trains (and validates) detectors.
    pub detector: Vec<LabeledImage>,
    /// Held out for evaluation.
    pub eval: Vec<LabeledImage>,
}

const SPLITS: [(&str, u64); 3] = [("train", 0), ("det", 1), ("eval", 2)];

/// Builds a toy task with `per_class_count` images of each class in each
/// split. Byte-identical for equal arguments.
pub fn make_toy_task(seed: u64, classes: usize, per_class_count: usize) -> Result<ToyTask, BlackBoxError> {
    make_toy_task_with(seed, classes, per_class_count, &ToyRenderConfig::default())
}

pub fn make_toy_task_with(
    seed: u64,
    classes: usize,
    per_class_count: usize,
    render: &ToyRenderConfig,
) -> Result<ToyTask, BlackBoxError> {
    let sizes = ToySplitSizes { train: per_class_count, detector: per_class_count, eval: per_class_count };
    make_toy_task_sized(seed, classes, sizes, render)
}

/// Images per class in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySplitSizes {
    pub train: usize,
    pub detector: usize,
    pub eval: usize,
}

/// Like [`make_toy_task_with`] with a separate size per split. Image `i` of a
/// split does not depend on the split size, so smaller tasks are prefixes of
/// larger ones.
pub fn make_toy_task_sized(
    seed: u64,
    classes: usize,
    sizes: ToySplitSizes,
    render: &ToyRenderConfig,
) -> Result<ToyTask, BlackBoxError> {
    if classes < 2 {
        return Err(BlackBoxError::InvalidArgument(format!("toy task needs at least 2 classes, got {classes}")));
    }
    let mut splits = SPLITS.iter().zip([sizes.train, sizes.detector, sizes.eval]).map(|(&(name, code), per_class)| {
        (0..classes * per_class)
            .map(|i| {
                // Interleave classes so any prefix is roughly balanced.
                let class = i % classes;
                LabeledImage {
                    id: format!("{name}-{i:05}"),
                    label: class as i64,
                    image: render_toy_image(seed, ToyDomain::Shapes, code, i as u64, class, render),
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(ToyTask {
        seed,
        classes,
        train: splits.next().unwrap(),
        detector: splits.next().unwrap(),
        eval: splits.next().unwrap(),
    })
}

/// `count` unlabeled images (label `-1`) from a novel domain. `split`
/// separates independent draws from the same domain.
pub fn make_domain_images(seed: u64, domain: ToyDomain, split: u64, count: usize) -> Vec<LabeledImage> {
    let render = ToyRenderConfig::default();
    (0..count)
        .map(|i| LabeledImage {
            id: format!("{}{split}-{i:05}", domain.name()),
            label: -1,
            image: render_toy_image(seed, domain, split, i as u64, 0, &render),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyClassifierConfig {
    /// Side of the square average-pooling window applied before the network.
    pub pool: usize,
    pub hidden_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
    /// Training-time augmentation; each training image then contributes
    /// `augmented_copies` jittered variants besides itself.
    #[serde(default)]
    pub augmentation: Option<AugmentationConfig>,
    #[serde(default)]
    pub augmented_copies: usize,
}

impl Default for ToyClassifierConfig {
    fn default() -> Self {
        Self {
            pool: 4,
            hidden_widths: vec![64],
            epochs: 15,
            batch_size: 64,
            learning_rate: 2e-3,
            rng_seed: 7,
            augmentation: Some(AugmentationConfig::default()),
            augmented_copies: 2,
        }
    }
}

/// A trained toy classifier. Output index `i` corresponds to the original
/// task label `class_labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    pub config: ToyClassifierConfig,
    pub class_labels: Vec<i64>,
    pub network: Network,
    pub history: TrainingHistory,
    pub train_accuracy: f64,
}

fn pooled_features(image: &ImageTensor, pool: usize) -> Vec<f64> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (ph, pw) = (h / pool, w / pool);
    let mut out = vec![0.0; ph * pw * c];
    let norm = 1.0 / (pool * pool) as f64;
    for r in 0..ph * pool {
        for col in 0..pw * pool {
            for ch in 0..c {
                out[((r / pool) * pw + col / pool) * c + ch] += image.get(r, col, ch);
            }
        }
    }
    for v in out.iter_mut() {
        *v = (*v * norm - 0.5) * 2.0;
    }
    out
}

impl ToyClassifier {
    fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    /// Output index of an original task label, if the classifier knows it.
    pub fn output_index(&self, label: i64) -> Option<usize> {
        self.class_labels.iter().position(|&l| l == label)
    }

    pub fn accuracy(&self, images: &[LabeledImage]) -> Result<f64, BlackBoxError> {
        if images.is_empty() {
            return Err(BlackBoxError::InvalidArgument("accuracy of an empty set".into()));
        }
        let mut hits = 0usize;
        for img in images {
            let logits = self.score(&img.image)?;
            if self.output_index(img.label) == Some(predict_class(&logits)) {
                hits += 1;
            }
        }
        Ok(hits as f64 / images.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), BlackBoxError> {
        Ok(persist::save_json(CLASSIFIER_KIND, &ClassifierFile::from(self), path)?)
    }

    pub fn load(path: &Path) -> Result<Self, BlackBoxError> {
        persist::load_json::<ClassifierFile>(CLASSIFIER_KIND, path)?.into_classifier()
    }
}

impl BlackBoxClassifier for ToyClassifier {
    fn class_count(&self) -> usize {
        self.class_labels.len()
    }

    fn score(&self, image: &ImageTensor) -> Result<Vec<f64>, BlackBoxError> {
        let features = pooled_features(image, self.config.pool);
        if features.len() != self.input_dim() {
            return Err(BlackBoxError::InvalidArgument(format!(
                "image {}x{}x{} does not fit a classifier with {} inputs",
                image.height(),
                image.width(),
                image.channels(),
                self.input_dim()
            )));
        }
        Ok(self.network.infer_logits(&features)?)
    }

    fn class_names(&self) -> Vec<String> {
        self.class_labels.iter().map(|l| format!("class_{l}")).collect()
    }
}

/// Trains a softmax classifier on the classes present in `train_set`.
pub fn train_toy_classifier(
    train_set: &[LabeledImage],
    config: &ToyClassifierConfig,
) -> Result<ToyClassifier, BlackBoxError> {
    let mut class_labels: Vec<i64> = train_set.iter().map(|i| i.label).collect();
    class_labels.sort_unstable();
    class_labels.dedup();
    if class_labels.iter().any(|&l| l < 0) {
        return Err(BlackBoxError::Training("training images must carry known labels".into()));
    }
    if class_labels.len() < 2 {
        return Err(BlackBoxError::Training(format!("need at least two classes, found {}", class_labels.len())));
    }
    if config.pool == 0 {
        return Err(BlackBoxError::InvalidArgument("pool must be positive".into()));
    }
    let first = &train_set[0].image;
    let dim = (first.height() / config.pool) * (first.width() / config.pool) * first.channels();
    let mut inputs = Vec::with_capacity(train_set.len() * dim);
    let mut targets = Vec::with_capacity(train_set.len());
    let mut aug_rng = config.augmentation.map(|a| {
        let mut r = ChaCha8Rng::seed_from_u64(a.rng_seed);
        r.set_stream(1);
        (a, r)
    });
    for img in train_set {
        let target = class_labels.binary_search(&img.label).unwrap();
        let mut push = |image: &ImageTensor| -> Result<(), BlackBoxError> {
            let f = pooled_features(image, config.pool);
            if f.len() != dim {
                return Err(BlackBoxError::InvalidArgument(format!("image {} has a different shape", img.id)));
            }
            inputs.extend_from_slice(&f);
            targets.push(target);
            Ok(())
        };
        push(&img.image)?;
        if let Some((aug, rng)) = aug_rng.as_mut() {
            for _ in 0..config.augmented_copies {
                push(&augment(&img.image, aug, rng)?)?;
            }
        }
    }

    let arch = Architecture {
        input_dim: dim,
        hidden_widths: config.hidden_widths.clone(),
        dropout_prob: 0.0,
        batchnorm: Some(BatchNormConfig::default()),
        block_order: BlockOrder::NormThenRelu,
        head: OutputHead::Softmax { classes: class_labels.len() },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let network = Network::new(arch, &mut rng)?;
    let opts = FitOptions {
        batch_size: config.batch_size,
        max_epochs: config.epochs,
        patience: None,
        optimizer: OptimizerConfig { learning_rate: config.learning_rate, ..OptimizerConfig::default() },
    };
    let weights = vec![1.0; targets.len()];
    type Validation = fn(&Network) -> Result<f64, crate::detector::DetectorError>;
    let no_validation: Option<Validation> = None;
    let (network, history) =
        fit(network, &inputs, &OwnedTargets::Class(targets), &weights, &opts, &mut rng, no_validation)?;
    let mut classifier = ToyClassifier { config: config.clone(), class_labels, network, history, train_accuracy: 0.0 };
    classifier.train_accuracy = classifier.accuracy(train_set)?;
    Ok(classifier)
}

const CLASSIFIER_KIND: &str = "classifier";

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    config: ToyClassifierConfig,
    class_labels: Vec<i64>,
    train_accuracy: f64,
    network: NetworkRecord,
    history: TrainingHistory,
}

impl From<&ToyClassifier> for ClassifierFile {
    fn from(c: &ToyClassifier) -> Self {
        Self {
            config: c.config.clone(),
            class_labels: c.class_labels.clone(),
            train_accuracy: c.train_accuracy,
            network: NetworkRecord::from(&c.network),
            history: c.history.clone(),
        }
    }
}

impl ClassifierFile {
    fn into_classifier(self) -> Result<ToyClassifier, BlackBoxError> {
        let network = self.network.to_network()?;
        if network.output_width() != self.class_labels.len() {
            return Err(BlackBoxError::InvalidArgument("classifier head width does not match its label map".into()));
        }
        Ok(ToyClassifier {
            config: self.config,
            class_labels: self.class_labels,
            network,
            history: self.history,
            train_accuracy: self.train_accuracy,
        })
    }
}
