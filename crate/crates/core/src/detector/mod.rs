//! The trainable error detector `d(x)`: a two-hidden-layer perceptron over
//! joint score representations, trained with class-rebalanced binary
//! cross-entropy.
//!
//! The same engine ([`network`], [`train`]) also trains the toy classifier
//! with a softmax head.

pub mod network;
pub mod persist;
pub mod train;

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics;
use crate::representation::FeatureSpec;
use network::{
    sigmoid, Architecture, BatchNormConfig, BlockOrder, DropoutMasks, Gradients, Network, OutputHead, Targets,
};
use train::{fit, FitOptions, OptimizerConfig, OwnedTargets};

pub use network::cross_entropy;
pub use train::{EpochRecord, TrainingHistory};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected a multiple of {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("model file checksum failure: {0}")]
    Checksum(String),
    #[error("unsupported model version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Filled in from the feature layout when left at 0.
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_prob: f64,
    #[serde(default)]
    pub batchnorm: BatchNormConfig,
    #[serde(default)]
    pub block_order: BlockOrder,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation-AUROC improvement before stopping.
    #[serde(default = "default_patience")]
    pub early_stopping_patience: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![70, 70]
}
fn default_dropout() -> f64 {
    0.5
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    60
}
fn default_patience() -> usize {
    10
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl DetectorConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: default_hidden(),
            dropout_prob: default_dropout(),
            batchnorm: BatchNormConfig::default(),
            block_order: BlockOrder::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            early_stopping_patience: default_patience(),
            rng_seed: 0,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            hidden_widths: self.hidden_widths.clone(),
            dropout_prob: self.dropout_prob,
            batchnorm: Some(self.batchnorm),
            block_order: self.block_order,
            head: OutputHead::Sigmoid,
        }
    }
}

/// Per-class example weights for the rebalanced loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_error: f64,
    pub w_correct: f64,
}

impl LossWeights {
    pub fn per_example(&self, labels: &[u8]) -> Vec<f64> {
        labels.iter().map(|&l| if l == 1 { self.w_error } else { self.w_correct }).collect()
    }
}

/// Inverse-frequency weights `N / (2 N_class)`, so the mean example weight
/// over the data set is 1.
pub fn compute_loss_weights(labels: &[u8]) -> Result<LossWeights, DetectorError> {
    let n = labels.len();
    let errors = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(DetectorError::InvalidArgument("labels must be 0 or 1".into()));
    }
    let correct = n - errors;
    if errors == 0 || correct == 0 {
        return Err(DetectorError::DegenerateLabels(format!(
            "{errors} error and {correct} correct examples; both classes are required"
        )));
    }
    Ok(LossWeights { w_error: n as f64 / (2.0 * errors as f64), w_correct: n as f64 / (2.0 * correct as f64) })
}

pub enum ForwardMode<'a> {
    /// Running batchnorm statistics, dropout disabled.
    Infer,
    /// Batch statistics and freshly drawn dropout masks.
    Train(&'a mut dyn RngCore),
}

/// A trained (or freshly initialized) detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub network: Network,
    pub history: TrainingHistory,
    /// How inputs are built, when known.
    pub features: Option<FeatureSpec>,
}

fn flatten(features: &[Vec<f64>], dim: usize) -> Result<Vec<f64>, DetectorError> {
    let mut flat = Vec::with_capacity(features.len() * dim);
    for f in features {
        if f.len() != dim {
            return Err(DetectorError::Dimension { expected: dim, got: f.len() });
        }
        flat.extend_from_slice(f);
    }
    Ok(flat)
}

impl DetectorModel {
    /// Initializes parameters from `config.rng_seed`.
    pub fn initialize(config: DetectorConfig) -> Result<Self, DetectorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let network = Network::new(config.architecture(), &mut rng)?;
        Ok(Self { config, network, history: TrainingHistory::default(), features: None })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Records the feature layout; it must produce `input_dim` values.
    pub fn with_features(mut self, spec: FeatureSpec) -> Result<Self, DetectorError> {
        check_spec(&spec, self.input_dim())?;
        self.features = Some(spec);
        Ok(self)
    }

    /// Error probabilities for a batch of feature vectors.
    pub fn forward(&self, features: &[Vec<f64>], mode: ForwardMode<'_>) -> Result<Vec<f64>, DetectorError> {
        let flat = flatten(features, self.input_dim())?;
        let logits = match mode {
            ForwardMode::Infer => self.network.infer_logits(&flat)?,
            ForwardMode::Train(rng) => {
                let masks = self.network.sample_masks(features.len(), rng);
                self.network.forward_train(&flat, &masks)?.logits
            }
        };
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Mean weighted cross-entropy of a batch and exact gradients for every
    /// parameter, under fixed dropout masks.
    pub fn loss_and_gradients(
        &self,
        features: &[Vec<f64>],
        labels: &[u8],
        example_weights: &[f64],
        masks: &DropoutMasks,
    ) -> Result<(f64, Gradients), DetectorError> {
        if features.len() < 2 {
            return Err(DetectorError::InvalidArgument("gradients need a batch of at least two examples".into()));
        }
        let flat = flatten(features, self.input_dim())?;
        let cache = self.network.forward_train(&flat, masks)?;
        let (loss, grad_logits) =
            cross_entropy(&cache.logits, OutputHead::Sigmoid, Targets::Binary(labels), example_weights)?;
        Ok((loss, self.network.backward(&cache, masks, &grad_logits)))
    }

    /// Inference-mode error scores, one per input, in input order.
    pub fn predict_scores(&self, features: &[Vec<f64>]) -> Result<Vec<f64>, DetectorError> {
        self.forward(features, ForwardMode::Infer)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        persist::save_json(DETECTOR_KIND, &DetectorFile::from(self), path)
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        persist::load_json::<DetectorFile>(DETECTOR_KIND, path)?.into_model()
    }

    pub fn to_json(&self) -> Result<String, DetectorError> {
        persist::to_json_string(DETECTOR_KIND, &DetectorFile::from(self))
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        persist::from_json_str::<DetectorFile>(DETECTOR_KIND, text)?.into_model()
    }
}

/// Outcome of comparing backprop gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub parameters_checked: usize,
    /// `|numeric - analytic| / max(|numeric|, |analytic|, 1e-6)`, maximized
    /// over parameters.
    pub max_relative_error: f64,
}

/// Central finite-difference check of every parameter gradient of the
/// weighted loss on one batch, with fixed dropout masks.
pub fn gradient_check(
    model: &DetectorModel,
    features: &[Vec<f64>],
    labels: &[u8],
    example_weights: &[f64],
    masks: &DropoutMasks,
    step: f64,
) -> Result<GradientCheck, DetectorError> {
    let (_, grads) = model.loss_and_gradients(features, labels, example_weights, masks)?;
    let loss_at = |m: &DetectorModel| m.loss_and_gradients(features, labels, example_weights, masks).map(|(l, _)| l);
    let mut max_relative_error = 0.0f64;
    let mut parameters_checked = 0;
    for (slot, g) in grads.0.iter().enumerate() {
        for (idx, &analytic) in g.iter().enumerate() {
            let mut plus = model.clone();
            plus.network.parameters_mut()[slot][idx] += step;
            let mut minus = model.clone();
            minus.network.parameters_mut()[slot][idx] -= step;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * step);
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            max_relative_error = max_relative_error.max((numeric - analytic).abs() / scale);
            parameters_checked += 1;
        }
    }
    Ok(GradientCheck { parameters_checked, max_relative_error })
}

const DETECTOR_KIND: &str = "detector";

#[derive(Serialize, Deserialize)]
struct DetectorFile {
    config: DetectorConfig,
    #[serde(default)]
    features: Option<FeatureSpec>,
    network: persist::NetworkRecord,
    history: TrainingHistory,
}

fn check_spec(spec: &FeatureSpec, input_dim: usize) -> Result<(), DetectorError> {
    if spec.transform_set.len() * spec.k_prime != input_dim {
        return Err(DetectorError::Architecture(format!(
            "{} transforms x k' = {} does not give {input_dim} inputs",
            spec.transform_set.len(),
            spec.k_prime
        )));
    }
    Ok(())
}

impl From<&DetectorModel> for DetectorFile {
    fn from(m: &DetectorModel) -> Self {
        Self {
            config: m.config.clone(),
            features: m.features.clone(),
            network: persist::NetworkRecord::from(&m.network),
            history: m.history.clone(),
        }
    }
}

impl DetectorFile {
    fn into_model(self) -> Result<DetectorModel, DetectorError> {
        if self.network.architecture() != &self.config.architecture() {
            return Err(DetectorError::Architecture("stored network does not match the stored configuration".into()));
        }
        if let Some(spec) = &self.features {
            check_spec(spec, self.config.input_dim)?;
        }
        Ok(DetectorModel {
            network: self.network.to_network()?,
            config: self.config,
            history: self.history,
            features: self.features,
        })
    }
}

/// A labeled detector data set: one feature vector and one 0/1 error label
/// per example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: LabeledFeatures) {
        self.features.extend(other.features);
        self.labels.extend(other.labels);
    }
}

/// Trains a detector with Adam on the rebalanced loss and keeps the epoch
/// with the best validation AUROC. Deterministic given `config.rng_seed`.
pub fn train(
    config: &DetectorConfig,
    train_set: &LabeledFeatures,
    validation: &LabeledFeatures,
) -> Result<DetectorModel, DetectorError> {
    let weights = compute_loss_weights(&train_set.labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let network = Network::new(config.architecture(), &mut rng)?;
    let inputs = flatten(&train_set.features, config.input_dim)?;
    let val_inputs = flatten(&validation.features, config.input_dim)?;
    let val_defined = validation.labels.contains(&0) && validation.labels.contains(&1);

    let opts = FitOptions {
        batch_size: config.batch_size,
        max_epochs: config.max_epochs,
        patience: Some(config.early_stopping_patience),
        optimizer: config.optimizer,
    };
    let targets = OwnedTargets::Binary(train_set.labels.clone());
    let example_weights = weights.per_example(&train_set.labels);
    let validate = val_defined.then_some(|net: &Network| -> Result<f64, DetectorError> {
        let scores: Vec<f64> = net.infer_logits(&val_inputs)?;
        metrics::auroc(&scores, &validation.labels).map_err(|e| DetectorError::InvalidArgument(e.to_string()))
    });
    if !val_defined {
        log::warn!("validation set lacks one of the classes; keeping the final epoch");
    }
    let (network, history) = fit(network, &inputs, &targets, &example_weights, &opts, &mut rng, validate)?;
    Ok(DetectorModel { config: config.clone(), network, history, features: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn loss_weights_follow_inverse_frequency() {
        let labels = [1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let w = compute_loss_weights(&labels).unwrap();
        assert_eq!(w.w_error, 2.5);
        assert_eq!(w.w_correct, 0.625);
        let mean: f64 = w.per_example(&labels).iter().sum::<f64>() / labels.len() as f64;
        assert!((mean - 1.0).abs() < 1e-15);

        let w = compute_loss_weights(&[1, 0, 1, 0]).unwrap();
        assert_eq!((w.w_error, w.w_correct), (1.0, 1.0));
        assert!(matches!(compute_loss_weights(&[0, 0]), Err(DetectorError::DegenerateLabels(_))));
    }

    fn toy_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let features = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        (features, labels)
    }

    #[test]
    fn zero_weight_examples_do_not_contribute() {
        let mut cfg = DetectorConfig::new(4);
        cfg.dropout_prob = 0.0;
        cfg.hidden_widths = vec![6, 5];
        let model = DetectorModel::initialize(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (features, labels) = toy_batch(&mut rng, 6, 4);
        let masks = model.network.sample_masks(6, &mut rng);

        // With batchnorm, an example still shifts the batch statistics, so the
        // check compares against the same batch with its label flipped.
        let mut weights = vec![1.0; 6];
        weights[2] = 0.0;
        let (_, g1) = model.loss_and_gradients(&features, &labels, &weights, &masks).unwrap();
        let mut flipped = labels.clone();
        flipped[2] = 1 - flipped[2];
        let (_, g2) = model.loss_and_gradients(&features, &flipped, &weights, &masks).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn duplicated_batch_leaves_gradients_unchanged() {
        let mut cfg = DetectorConfig::new(3);
        cfg.dropout_prob = 0.0;
        let model = DetectorModel::initialize(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (features, labels) = toy_batch(&mut rng, 5, 3);
        let masks = model.network.sample_masks(5, &mut rng);
        let (l1, g1) = model.loss_and_gradients(&features, &labels, &[1.0; 5], &masks).unwrap();

        let features2: Vec<Vec<f64>> = features.iter().chain(&features).cloned().collect();
        let labels2: Vec<u8> = labels.iter().chain(&labels).copied().collect();
        let masks2 = model.network.sample_masks(10, &mut rng);
        let (l2, g2) = model.loss_and_gradients(&features2, &labels2, &[1.0; 10], &masks2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.0.iter().flatten().zip(g2.0.iter().flatten()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let model = DetectorModel::initialize(DetectorConfig::new(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masks = model.network.sample_masks(1, &mut rng);
        assert!(model.loss_and_gradients(&[vec![0.0, 1.0]], &[1], &[1.0], &masks).is_err());
    }

    #[test]
    fn zero_dropout_train_forward_ignores_rng() {
        let mut cfg = DetectorConfig::new(3);
        cfg.dropout_prob = 0.0;
        let model = DetectorModel::initialize(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (features, _) = toy_batch(&mut rng, 4, 3);
        let a = model.forward(&features, ForwardMode::Train(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        let b = model.forward(&features, ForwardMode::Train(&mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infer_is_deterministic_and_bounded() {
        let model = DetectorModel::initialize(DetectorConfig::new(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (features, _) = toy_batch(&mut rng, 7, 3);
        let a = model.predict_scores(&features).unwrap();
        assert_eq!(a, model.predict_scores(&features).unwrap());
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
        let one_by_one: Vec<f64> =
            features.iter().map(|f| model.predict_scores(std::slice::from_ref(f)).unwrap()[0]).collect();
        for (x, y) in a.iter().zip(&one_by_one) {
            assert!((x - y).abs() < 1e-9);
        }
        let mut reversed = features.clone();
        reversed.reverse();
        let mut r = model.predict_scores(&reversed).unwrap();
        r.reverse();
        assert_eq!(r, a);
        assert!(matches!(model.predict_scores(&[vec![1.0, 2.0]]), Err(DetectorError::Dimension { .. })));
    }
}
