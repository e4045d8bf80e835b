//! Fully connected network with optional batch normalization and inverted
//! dropout in each hidden block, and either a single sigmoid output or a
//! softmax output over classes. Everything is computed in `f64` on row-major
//! `batch x features` buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DetectorError;

/// Order of the nonlinearity and the normalization inside a hidden block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    /// linear -> ReLU -> batchnorm -> dropout
    #[default]
    ReluThenNorm,
    /// linear -> batchnorm -> ReLU -> dropout
    NormThenRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputHead {
    /// One logit, probability via the logistic function.
    Sigmoid,
    /// One logit per class.
    Softmax { classes: usize },
}

impl OutputHead {
    pub fn width(self) -> usize {
        match self {
            OutputHead::Sigmoid => 1,
            OutputHead::Softmax { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { momentum: 0.9, epsilon: 1e-5 }
    }
}

/// Shape description used to build a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub dropout_prob: f64,
    pub batchnorm: Option<BatchNormConfig>,
    pub block_order: BlockOrder,
    pub head: OutputHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform fan-in scaled (He) initialization; biases start at zero.
    fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    fn forward(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.out_dim];
        for b in 0..batch {
            let x = &input[b * self.in_dim..(b + 1) * self.in_dim];
            let y = &mut out[b * self.out_dim..(b + 1) * self.out_dim];
            for (o, y_o) in y.iter_mut().enumerate() {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                *y_o = self.bias[o] + dot(w, x);
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        batch: usize,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        need_input_grad: bool,
    ) -> Vec<f64> {
        let mut grad_in = if need_input_grad { vec![0.0; batch * self.in_dim] } else { Vec::new() };
        for b in 0..batch {
            let x = &input[b * self.in_dim..(b + 1) * self.in_dim];
            let g = &grad_out[b * self.out_dim..(b + 1) * self.out_dim];
            for (o, &g_o) in g.iter().enumerate() {
                if g_o == 0.0 {
                    continue;
                }
                grad_bias[o] += g_o;
                let gw = &mut grad_weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (gw_i, &x_i) in gw.iter_mut().zip(x) {
                    *gw_i += g_o * x_i;
                }
                if need_input_grad {
                    let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                    let gi = &mut grad_in[b * self.in_dim..(b + 1) * self.in_dim];
                    for (gi_i, &w_i) in gi.iter_mut().zip(w) {
                        *gi_i += g_o * w_i;
                    }
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub dim: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    fn new(dim: usize, cfg: BatchNormConfig) -> Self {
        Self {
            dim,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: cfg.momentum,
            epsilon: cfg.epsilon,
        }
    }

    fn infer(&self, x: &mut [f64]) {
        for row in x.chunks_exact_mut(self.dim) {
            for (j, v) in row.iter_mut().enumerate() {
                let inv_std = 1.0 / (self.running_var[j] + self.epsilon).sqrt();
                *v = self.gamma[j] * (*v - self.running_mean[j]) * inv_std + self.beta[j];
            }
        }
    }

    /// Normalizes with batch statistics (biased variance) in place.
    fn train(&self, x: &mut [f64], batch: usize) -> NormCache {
        let dim = self.dim;
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for j in 0..dim {
                mean[j] += row[j];
            }
        }
        for m in mean.iter_mut() {
            *m /= batch as f64;
        }
        for row in x.chunks_exact(dim) {
            for j in 0..dim {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= batch as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut normalized = vec![0.0; x.len()];
        for (row, nrow) in x.chunks_exact_mut(dim).zip(normalized.chunks_exact_mut(dim)) {
            for j in 0..dim {
                nrow[j] = (row[j] - mean[j]) * inv_std[j];
                row[j] = self.gamma[j] * nrow[j] + self.beta[j];
            }
        }
        NormCache { mean, var, inv_std, normalized }
    }

    fn backward(
        &self,
        cache: &NormCache,
        grad_out: &[f64],
        batch: usize,
        grad_gamma: &mut [f64],
        grad_beta: &mut [f64],
    ) -> Vec<f64> {
        let dim = self.dim;
        let n = batch as f64;
        let mut sum_dxhat = vec![0.0; dim];
        let mut sum_dxhat_xhat = vec![0.0; dim];
        for (g, xhat) in grad_out.chunks_exact(dim).zip(cache.normalized.chunks_exact(dim)) {
            for j in 0..dim {
                grad_gamma[j] += g[j] * xhat[j];
                grad_beta[j] += g[j];
                let dxhat = g[j] * self.gamma[j];
                sum_dxhat[j] += dxhat;
                sum_dxhat_xhat[j] += dxhat * xhat[j];
            }
        }
        let mut grad_in = vec![0.0; grad_out.len()];
        for ((gi, g), xhat) in
            grad_in.chunks_exact_mut(dim).zip(grad_out.chunks_exact(dim)).zip(cache.normalized.chunks_exact(dim))
        {
            for j in 0..dim {
                let dxhat = g[j] * self.gamma[j];
                gi[j] = cache.inv_std[j] / n * (n * dxhat - sum_dxhat[j] - xhat[j] * sum_dxhat_xhat[j]);
            }
        }
        grad_in
    }

    fn update_running(&mut self, cache: &NormCache, batch: usize) {
        let unbias = if batch > 1 { batch as f64 / (batch as f64 - 1.0) } else { 1.0 };
        for j in 0..self.dim {
            self.running_mean[j] = self.momentum * self.running_mean[j] + (1.0 - self.momentum) * cache.mean[j];
            self.running_var[j] = self.momentum * self.running_var[j] + (1.0 - self.momentum) * cache.var[j] * unbias;
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBlock {
    pub dense: Dense,
    pub norm: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub blocks: Vec<HiddenBlock>,
    pub head: Dense,
}

/// Keep-masks for every hidden block, `batch x width` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks(pub Vec<Vec<bool>>);

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    pre_activation: Vec<f64>,
    /// Values entering the ReLU (pre-activation or normalized output).
    relu_input: Vec<f64>,
    norm: Option<NormCache>,
}

/// Intermediate values of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    blocks: Vec<BlockCache>,
    head_input: Vec<f64>,
    /// `batch x head width` raw outputs.
    pub logits: Vec<f64>,
}

/// Per-parameter gradients in [`Network::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Network {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self, DetectorError> {
        validate_architecture(&arch)?;
        let mut blocks = Vec::with_capacity(arch.hidden_widths.len());
        let mut in_dim = arch.input_dim;
        for &width in &arch.hidden_widths {
            blocks.push(HiddenBlock {
                dense: Dense::init(in_dim, width, rng),
                norm: arch.batchnorm.map(|cfg| BatchNorm::new(width, cfg)),
            });
            in_dim = width;
        }
        let head = Dense::init(in_dim, arch.head.width(), rng);
        Ok(Self { arch, blocks, head })
    }

    /// A network with every weight and bias set to zero.
    pub fn zeroed(arch: Architecture) -> Result<Self, DetectorError> {
        validate_architecture(&arch)?;
        let mut blocks = Vec::new();
        let mut in_dim = arch.input_dim;
        for &width in &arch.hidden_widths {
            blocks.push(HiddenBlock {
                dense: Dense::zeros(in_dim, width),
                norm: arch.batchnorm.map(|cfg| BatchNorm::new(width, cfg)),
            });
            in_dim = width;
        }
        let head = Dense::zeros(in_dim, arch.head.width());
        Ok(Self { arch, blocks, head })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn output_width(&self) -> usize {
        self.head.out_dim
    }

    /// Trainable parameter buffers in canonical order: per block weight, bias,
    /// then gamma and beta when normalized; finally head weight and bias.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for block in &self.blocks {
            out.push(&block.dense.weight);
            out.push(&block.dense.bias);
            if let Some(norm) = &block.norm {
                out.push(&norm.gamma);
                out.push(&norm.beta);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.dense.weight);
            out.push(&mut block.dense.bias);
            if let Some(norm) = &mut block.norm {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.parameters().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self
                .blocks
                .iter()
                .filter_map(|b| b.norm.as_ref())
                .all(|n| n.running_mean.iter().chain(&n.running_var).all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<usize, DetectorError> {
        let dim = self.arch.input_dim;
        if !input.len().is_multiple_of(dim) {
            return Err(DetectorError::Dimension { expected: dim, got: input.len() });
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(DetectorError::InvalidArgument(format!("non-finite feature at flat index {i}")));
        }
        Ok(input.len() / dim)
    }

    /// Samples inverted-dropout keep masks for a batch.
    pub fn sample_masks<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> DropoutMasks {
        let p = self.arch.dropout_prob;
        DropoutMasks(
            self.blocks
                .iter()
                .map(|b| (0..batch * b.dense.out_dim).map(|_| p == 0.0 || rng.random::<f64>() >= p).collect())
                .collect(),
        )
    }

    /// Deterministic inference: running batchnorm statistics, no dropout.
    /// Returns `batch x head width` raw logits.
    pub fn infer_logits(&self, input: &[f64]) -> Result<Vec<f64>, DetectorError> {
        let batch = self.check_input(input)?;
        let mut x = input.to_vec();
        for block in &self.blocks {
            let mut z = block.dense.forward(&x, batch);
            match (&block.norm, self.arch.block_order) {
                (Some(norm), BlockOrder::ReluThenNorm) => {
                    relu_in_place(&mut z);
                    norm.infer(&mut z);
                }
                (Some(norm), BlockOrder::NormThenRelu) => {
                    norm.infer(&mut z);
                    relu_in_place(&mut z);
                }
                (None, _) => relu_in_place(&mut z),
            }
            x = z;
        }
        Ok(self.head.forward(&x, batch))
    }

    /// Train-mode forward with batch statistics and the given dropout masks.
    /// Does not touch the running statistics.
    pub fn forward_train(&self, input: &[f64], masks: &DropoutMasks) -> Result<ForwardCache, DetectorError> {
        let batch = self.check_input(input)?;
        if self.arch.batchnorm.is_some() && batch < 2 {
            return Err(DetectorError::InvalidArgument("batch normalization needs a batch of at least 2".into()));
        }
        if masks.0.len() != self.blocks.len() {
            return Err(DetectorError::InvalidArgument("dropout masks do not match the network".into()));
        }
        let keep_scale = 1.0 / (1.0 - self.arch.dropout_prob);
        let mut x = input.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, mask) in self.blocks.iter().zip(&masks.0) {
            if mask.len() != batch * block.dense.out_dim {
                return Err(DetectorError::InvalidArgument("dropout mask has the wrong batch size".into()));
            }
            let pre_activation = block.dense.forward(&x, batch);
            let mut h = pre_activation.clone();
            let (relu_input, norm) = match (&block.norm, self.arch.block_order) {
                (Some(norm), BlockOrder::ReluThenNorm) => {
                    relu_in_place(&mut h);
                    let cache = norm.train(&mut h, batch);
                    (pre_activation.clone(), Some(cache))
                }
                (Some(norm), BlockOrder::NormThenRelu) => {
                    let cache = norm.train(&mut h, batch);
                    let relu_input = h.clone();
                    relu_in_place(&mut h);
                    (relu_input, Some(cache))
                }
                (None, _) => {
                    relu_in_place(&mut h);
                    (pre_activation.clone(), None)
                }
            };
            for (v, &keep) in h.iter_mut().zip(mask) {
                *v = if keep { *v * keep_scale } else { 0.0 };
            }
            caches.push(BlockCache { input: std::mem::replace(&mut x, h), pre_activation, relu_input, norm });
        }
        let logits = self.head.forward(&x, batch);
        Ok(ForwardCache { batch, blocks: caches, head_input: x, logits })
    }

    /// Backpropagates `grad_logits` (dLoss/dlogits, `batch x head width`).
    pub fn backward(&self, cache: &ForwardCache, masks: &DropoutMasks, grad_logits: &[f64]) -> Gradients {
        let batch = cache.batch;
        let mut grads = self.zero_gradients();
        let n_params = grads.0.len();
        let (head_w, rest) = grads.0[n_params - 2..].split_at_mut(1);
        let mut grad = self.head.backward(
            &cache.head_input,
            grad_logits,
            batch,
            &mut head_w[0],
            &mut rest[0],
            !self.blocks.is_empty(),
        );

        let keep_scale = 1.0 / (1.0 - self.arch.dropout_prob);
        let mut slot = n_params - 2;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            for (g, &keep) in grad.iter_mut().zip(&masks.0[i]) {
                *g = if keep { *g * keep_scale } else { 0.0 };
            }
            let has_norm = block.norm.is_some();
            let base = slot - if has_norm { 4 } else { 2 };
            slot = base;
            let (dense_slots, norm_slots) = grads.0[base..base + if has_norm { 4 } else { 2 }].split_at_mut(2);
            let grad_pre = match (&block.norm, self.arch.block_order) {
                (Some(norm), BlockOrder::ReluThenNorm) => {
                    let (gg, gb) = norm_slots.split_at_mut(1);
                    let mut g = norm.backward(bc.norm.as_ref().unwrap(), &grad, batch, &mut gg[0], &mut gb[0]);
                    relu_backward(&mut g, &bc.relu_input);
                    g
                }
                (Some(norm), BlockOrder::NormThenRelu) => {
                    relu_backward(&mut grad, &bc.relu_input);
                    let (gg, gb) = norm_slots.split_at_mut(1);
                    norm.backward(bc.norm.as_ref().unwrap(), &grad, batch, &mut gg[0], &mut gb[0])
                }
                (None, _) => {
                    relu_backward(&mut grad, &bc.pre_activation);
                    std::mem::take(&mut grad)
                }
            };
            let (gw, gb) = dense_slots.split_at_mut(1);
            grad = block.dense.backward(&bc.input, &grad_pre, batch, &mut gw[0], &mut gb[0], i > 0);
        }
        grads
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates used at inference.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            if let (Some(norm), Some(nc)) = (&mut block.norm, &bc.norm) {
                norm.update_running(nc, cache.batch);
            }
        }
    }
}

fn validate_architecture(arch: &Architecture) -> Result<(), DetectorError> {
    if arch.input_dim == 0 {
        return Err(DetectorError::InvalidArgument("input_dim must be positive".into()));
    }
    if arch.hidden_widths.contains(&0) {
        return Err(DetectorError::InvalidArgument("hidden widths must be positive".into()));
    }
    if !(0.0..1.0).contains(&arch.dropout_prob) {
        return Err(DetectorError::InvalidArgument(format!(
            "dropout probability {} outside [0, 1)",
            arch.dropout_prob
        )));
    }
    if let OutputHead::Softmax { classes } = arch.head {
        if classes < 2 {
            return Err(DetectorError::InvalidArgument("softmax head needs at least 2 classes".into()));
        }
    }
    if let Some(bn) = arch.batchnorm {
        if !(0.0..1.0).contains(&bn.momentum) || bn.epsilon.is_nan() || bn.epsilon <= 0.0 {
            return Err(DetectorError::InvalidArgument("invalid batchnorm configuration".into()));
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu_in_place(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn relu_backward(grad: &mut [f64], input: &[f64]) {
    for (g, &x) in grad.iter_mut().zip(input) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Training targets for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// 0/1 labels for a sigmoid head.
    Binary(&'a [u8]),
    /// Class indices for a softmax head.
    Class(&'a [usize]),
}

/// Mean weighted cross-entropy `(1/B) sum_i w_i l_i` of raw logits and its
/// gradient with respect to those logits.
pub fn cross_entropy(
    logits: &[f64],
    head: OutputHead,
    targets: Targets<'_>,
    weights: &[f64],
) -> Result<(f64, Vec<f64>), DetectorError> {
    let width = head.width();
    let batch = logits.len() / width;
    if weights.len() != batch {
        return Err(DetectorError::InvalidArgument("one weight per example is required".into()));
    }
    let n = batch as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    match (head, targets) {
        (OutputHead::Sigmoid, Targets::Binary(labels)) => {
            if labels.len() != batch {
                return Err(DetectorError::InvalidArgument("label count mismatch".into()));
            }
            for i in 0..batch {
                let z = logits[i];
                let y = labels[i] as f64;
                loss += weights[i] * (softplus(z) - y * z);
                grad[i] = weights[i] * (sigmoid(z) - y) / n;
            }
        }
        (OutputHead::Softmax { classes }, Targets::Class(labels)) => {
            if labels.len() != batch {
                return Err(DetectorError::InvalidArgument("label count mismatch".into()));
            }
            for i in 0..batch {
                let y = labels[i];
                if y >= classes {
                    return Err(DetectorError::InvalidArgument(format!(
                        "class label {y} out of range for {classes} classes"
                    )));
                }
                let row = &logits[i * width..(i + 1) * width];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let log_sum = max + sum.ln();
                loss += weights[i] * (log_sum - row[y]);
                for c in 0..classes {
                    let p = (row[c] - log_sum).exp();
                    let target = if c == y { 1.0 } else { 0.0 };
                    grad[i * width + c] = weights[i] * (p - target) / n;
                }
            }
        }
        _ => return Err(DetectorError::InvalidArgument("targets do not match the output head".into())),
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(order: BlockOrder, head: OutputHead, dropout: f64, bn: bool) -> Architecture {
        Architecture {
            input_dim: 4,
            hidden_widths: vec![5, 3],
            dropout_prob: dropout,
            batchnorm: bn.then(BatchNormConfig::default),
            block_order: order,
            head,
        }
    }

    fn loss_of(net: &Network, input: &[f64], masks: &DropoutMasks, targets: Targets<'_>, w: &[f64]) -> f64 {
        let cache = net.forward_train(input, masks).unwrap();
        cross_entropy(&cache.logits, net.arch.head, targets, w).unwrap().0
    }

    fn check_gradients(order: BlockOrder, head: OutputHead, bn: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(arch(order, head, 0.3, bn), &mut rng).unwrap();
        // Move batchnorm affine parameters away from their trivial init.
        for block in &mut net.blocks {
            if let Some(norm) = &mut block.norm {
                for g in norm.gamma.iter_mut() {
                    *g = rng.random_range(0.5..1.5);
                }
                for b in norm.beta.iter_mut() {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
        }
        let batch = 6;
        let input: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..batch).map(|_| rng.random_range(0.2..2.0)).collect();
        let bin: Vec<u8> = (0..batch).map(|i| (i % 2) as u8).collect();
        let cls: Vec<usize> = (0..batch).map(|i| i % head.width()).collect();
        let targets = match head {
            OutputHead::Sigmoid => Targets::Binary(&bin),
            OutputHead::Softmax { .. } => Targets::Class(&cls),
        };
        let masks = net.sample_masks(batch, &mut rng);
        let cache = net.forward_train(&input, &masks).unwrap();
        let (_, dlogits) = cross_entropy(&cache.logits, head, targets, &weights).unwrap();
        let grads = net.backward(&cache, &masks, &dlogits);

        let h = 1e-6;
        let n_slots = grads.0.len();
        for slot in 0..n_slots {
            for idx in 0..grads.0[slot].len() {
                let mut plus = net.clone();
                plus.parameters_mut()[slot][idx] += h;
                let mut minus = net.clone();
                minus.parameters_mut()[slot][idx] -= h;
                let numeric = (loss_of(&plus, &input, &masks, targets, &weights)
                    - loss_of(&minus, &input, &masks, targets, &weights))
                    / (2.0 * h);
                let analytic = grads.0[slot][idx];
                let scale = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / scale < 1e-4,
                    "slot {slot} idx {idx}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(BlockOrder::ReluThenNorm, OutputHead::Sigmoid, true, 1);
        check_gradients(BlockOrder::NormThenRelu, OutputHead::Sigmoid, true, 2);
        check_gradients(BlockOrder::ReluThenNorm, OutputHead::Softmax { classes: 3 }, true, 3);
        check_gradients(BlockOrder::ReluThenNorm, OutputHead::Softmax { classes: 4 }, false, 4);
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let net = Network::zeroed(arch(BlockOrder::ReluThenNorm, OutputHead::Sigmoid, 0.5, true)).unwrap();
        let logits = net.infer_logits(&[0.3, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(sigmoid(logits[0]), 0.5);
    }

    #[test]
    fn unit_weights_reduce_to_plain_cross_entropy() {
        let logits = [0.3, -1.2, 2.5];
        let labels = [1u8, 0, 0];
        let (loss, _) = cross_entropy(&logits, OutputHead::Sigmoid, Targets::Binary(&labels), &[1.0; 3]).unwrap();
        let plain: f64 = logits
            .iter()
            .zip(labels)
            .map(|(&z, y)| {
                let p = sigmoid(z);
                -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - plain).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = Network::zeroed(arch(BlockOrder::ReluThenNorm, OutputHead::Sigmoid, 0.0, true)).unwrap();
        assert!(matches!(net.infer_logits(&[1.0, 2.0, 3.0]), Err(DetectorError::Dimension { expected: 4, got: 3 })));
    }

    #[test]
    fn single_example_batch_rejected_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(arch(BlockOrder::ReluThenNorm, OutputHead::Sigmoid, 0.0, true), &mut rng).unwrap();
        let masks = net.sample_masks(1, &mut rng);
        assert!(net.forward_train(&[0.0; 4], &masks).is_err());
    }

    #[test]
    fn bad_architectures_rejected() {
        let mut a = arch(BlockOrder::ReluThenNorm, OutputHead::Sigmoid, 1.0, true);
        assert!(Network::zeroed(a.clone()).is_err());
        a.dropout_prob = 0.5;
        a.hidden_widths = vec![0];
        assert!(Network::zeroed(a).is_err());
    }
}
