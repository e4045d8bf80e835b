//! Mini-batch training shared by the error detector and the toy classifier.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{cross_entropy, Gradients, Network, Targets};
use super::DetectorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999 }
    }
}

const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        Self { cfg, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn apply(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let correction1 = 1.0 - b1.powi(self.step);
        let correction2 = 1.0 - b2.powi(self.step);
        let lr = self.cfg.learning_rate;
        for (((param, grad), m), v) in
            net.parameters_mut().into_iter().zip(&grads.0).zip(&mut self.first).zip(&mut self.second)
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the epoch's batches.
    pub train_loss: f64,
    /// Validation metric after the epoch (AUROC for detectors, accuracy for
    /// classifiers), when a validation set was given.
    pub validation_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct FitOptions {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub optimizer: OptimizerConfig,
}

pub(crate) enum OwnedTargets {
    Binary(Vec<u8>),
    Class(Vec<usize>),
}

impl OwnedTargets {
    fn gather(&self, idx: &[usize]) -> OwnedTargets {
        match self {
            OwnedTargets::Binary(v) => OwnedTargets::Binary(idx.iter().map(|&i| v[i]).collect()),
            OwnedTargets::Class(v) => OwnedTargets::Class(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    fn view(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Binary(v) => Targets::Binary(v),
            OwnedTargets::Class(v) => Targets::Class(v),
        }
    }
}

/// Splits a shuffled index list into batches; a trailing batch of one is
/// folded into its predecessor since batch statistics need two rows.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Runs Adam over shuffled mini-batches. With a validation closure the
/// parameters of the best-scoring epoch are returned (ties keep the earlier
/// epoch); otherwise the final parameters.
pub(crate) fn fit<R, V>(
    mut net: Network,
    inputs: &[f64],
    targets: &OwnedTargets,
    weights: &[f64],
    opts: &FitOptions,
    rng: &mut R,
    mut validate: Option<V>,
) -> Result<(Network, TrainingHistory), DetectorError>
where
    R: Rng + ?Sized,
    V: FnMut(&Network) -> Result<f64, DetectorError>,
{
    let dim = net.input_dim();
    let n = weights.len();
    if inputs.len() != n * dim {
        return Err(DetectorError::Dimension { expected: n * dim, got: inputs.len() });
    }
    if n < 2 {
        return Err(DetectorError::InvalidArgument("training needs at least two examples".into()));
    }
    if opts.batch_size < 2 {
        return Err(DetectorError::InvalidArgument("batch size must be at least 2".into()));
    }

    let mut adam = Adam::new(opts.optimizer, &net);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0usize;
    let mut batch_inputs = Vec::new();

    for epoch in 0..opts.max_epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batch_count = 0usize;
        for idx in batches(&order, opts.batch_size) {
            batch_inputs.clear();
            for &i in idx {
                batch_inputs.extend_from_slice(&inputs[i * dim..(i + 1) * dim]);
            }
            let batch_targets = targets.gather(idx);
            let batch_weights: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
            let masks = net.sample_masks(idx.len(), rng);
            let cache = net.forward_train(&batch_inputs, &masks)?;
            let (loss, grad_logits) =
                cross_entropy(&cache.logits, net.arch.head, batch_targets.view(), &batch_weights)?;
            if !loss.is_finite() {
                return Err(DetectorError::Diverged { epoch });
            }
            let grads = net.backward(&cache, &masks, &grad_logits);
            net.update_running_stats(&cache);
            adam.apply(&mut net, &grads);
            loss_sum += loss;
            batch_count += 1;
        }
        if !net.is_finite() {
            return Err(DetectorError::Diverged { epoch });
        }
        let train_loss = loss_sum / batch_count as f64;

        let metric = match validate.as_mut() {
            Some(f) => Some(f(&net)?),
            None => None,
        };
        history.epochs.push(EpochRecord { epoch, train_loss, validation_metric: metric });
        match metric {
            Some(m) => {
                if best.as_ref().is_none_or(|(b, _)| m > *b) {
                    best = Some((m, net.clone()));
                    history.best_epoch = Some(epoch);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if opts.patience.is_some_and(|p| since_best >= p) {
                        break;
                    }
                }
            }
            None => history.best_epoch = Some(epoch),
        }
    }

    let net = match best {
        Some((_, snapshot)) => snapshot,
        None => net,
    };
    Ok((net, history))
}
