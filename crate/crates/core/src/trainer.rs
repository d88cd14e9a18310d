//! A small fully connected embedding network trained end-to-end with either
//! the plain softmax head or the crystal head, plus the diagnostics used to
//! compare them: end-to-end gradient checking and angular spread of the
//! learned features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{self, CrystalHead, LossBatchResult};
use crate::math::{self, DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// A dense layer `act(W x + b)` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let last = layers.last().ok_or(Error::Empty("model layers"))?;
        if last.activation != Activation::Identity {
            return Err(Error::InvalidConfig(
                "final layer must use the identity activation".into(),
            ));
        }
        for layer in &layers {
            if layer.bias.dim() != layer.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layer.output_dim(),
                    got: layer.bias.dim(),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        Ok(MlpModel { layers })
    }

    /// `dims = [input, hidden.., embedding]`; ReLU on hidden layers, identity
    /// on the last. Weights are He-uniform, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "model needs at least input and output dimensions, got {dims:?}"
            )));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Ok(Layer {
                    weights: DenseMatrix::new(fan_out, fan_in, data)?,
                    bias: DenseVector::zeros(fan_out),
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpModel::new(layers)
    }

    /// A single identity layer `f(x) = x`.
    pub fn identity(dim: usize) -> Self {
        let mut w = DenseMatrix::zeros(dim, dim);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        MlpModel {
            layers: vec![Layer {
                weights: w,
                bias: DenseVector::zeros(dim),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.dim())
            .sum()
    }

    /// Activations of every layer; index 0 is the input.
    fn forward_all(&self, inputs: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.cols(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.clone());
        for layer in &self.layers {
            let prev = acts.last().expect("input pushed");
            let mut out = DenseMatrix::zeros(prev.rows(), layer.output_dim());
            for (i, x) in prev.iter_rows().enumerate() {
                let row = out.row_mut(i);
                for (o, (w, b)) in row
                    .iter_mut()
                    .zip(layer.weights.iter_rows().zip(layer.bias.iter()))
                {
                    let v = math::dot(w, x) + b;
                    *o = match layer.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Identity => v,
                    };
                }
            }
            acts.push(out);
        }
        Ok(acts)
    }

    /// Penultimate ("embedding") features for a batch of inputs.
    pub fn forward(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_all(inputs)?.pop().expect("at least one layer"))
    }

    fn backward(&self, acts: &[DenseMatrix], grad_out: &DenseMatrix) -> Vec<LayerGrad> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = &acts[li + 1];
            let input = &acts[li];
            if layer.activation == Activation::Relu {
                for (d, &a) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let mut gw = DenseMatrix::zeros(layer.output_dim(), layer.input_dim());
            let mut gb = vec![0.0; layer.output_dim()];
            for (d_row, x) in delta.iter_rows().zip(input.iter_rows()) {
                for (o, &d) in d_row.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &xi) in gw.row_mut(o).iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if li > 0 {
                let mut next = DenseMatrix::zeros(delta.rows(), layer.input_dim());
                for (i, d_row) in delta.iter_rows().enumerate() {
                    next.row_mut(i)
                        .copy_from_slice(&layer.weights.mul_vec_transposed(d_row));
                }
                delta = next;
            }
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        grads
    }

    fn sgd_step(&mut self, grads: &[LayerGrad], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, gw) in layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(g.weights.as_slice())
            {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }
}

/// Inputs with integer class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(LabeledSet {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadKind {
    Softmax,
    CrystalFixed(f64),
    CrystalTrainable,
}

impl HeadKind {
    /// Builds a freshly initialized head of this kind. Softmax heads carry an
    /// unused alpha of 1.
    pub fn init_head<R: Rng + ?Sized>(
        self,
        num_classes: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<CrystalHead> {
        match self {
            HeadKind::Softmax => CrystalHead::init(num_classes, feature_dim, 1.0, false, rng),
            HeadKind::CrystalFixed(alpha) => {
                CrystalHead::init(num_classes, feature_dim, alpha, false, rng)
            }
            HeadKind::CrystalTrainable => {
                CrystalHead::init_trainable(num_classes, feature_dim, rng)
            }
        }
    }

    fn check_head(self, head: &CrystalHead) -> Result<()> {
        match self {
            HeadKind::Softmax => Ok(()),
            HeadKind::CrystalFixed(_) if head.alpha_trainable() => Err(Error::InvalidConfig(
                "fixed-alpha training given a trainable head".into(),
            )),
            HeadKind::CrystalTrainable if !head.alpha_trainable() => Err(Error::InvalidConfig(
                "trainable-alpha training given a fixed head".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_crystal(self) -> bool {
        !matches!(self, HeadKind::Softmax)
    }

    pub fn logits(self, head: &CrystalHead, feature: &[f64]) -> Result<Vec<f64>> {
        match self {
            HeadKind::Softmax => loss::plain_logits(head.weights(), head.bias(), feature),
            _ => head.logits(feature),
        }
    }

    pub fn loss_and_grads(
        self,
        head: &CrystalHead,
        features: &DenseMatrix,
        labels: &[usize],
    ) -> Result<LossBatchResult> {
        match self {
            HeadKind::Softmax => {
                loss::plain_softmax_forward_backward(head.weights(), head.bias(), features, labels)
            }
            _ => loss::crystal_backward(head, features, labels),
        }
    }

    pub fn loss(self, head: &CrystalHead, features: &DenseMatrix, labels: &[usize]) -> Result<f64> {
        match self {
            HeadKind::Softmax => Ok(self.loss_and_grads(head, features, labels)?.loss),
            _ => loss::crystal_forward(head, features, labels),
        }
    }
}

/// Default clipping threshold for [`TrainConfig::max_grad_norm`].
pub const DEFAULT_MAX_GRAD_NORM: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_drop_steps: Vec<usize>,
    pub lr_drop_factor: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub head_kind: HeadKind,
    /// Rescales a step whose global gradient norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            base_lr: 0.1,
            lr_drop_steps: vec![],
            lr_drop_factor: 0.1,
            max_iters: 1000,
            seed: 0,
            head_kind: HeadKind::CrystalFixed(16.0),
            max_grad_norm: Some(DEFAULT_MAX_GRAD_NORM),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::InvalidConfig(
                "lr_drop_factor must lie in (0, 1]".into(),
            ));
        }
        if self.lr_drop_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "lr_drop_steps must be strictly increasing".into(),
            ));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvalidConfig(
                    "max_grad_norm must be positive".into(),
                ));
            }
        }
        if let HeadKind::CrystalFixed(alpha) = self.head_kind {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::NonPositiveAlpha(alpha));
            }
        }
        Ok(())
    }

    /// Step schedule: `base_lr · factor^(number of drop steps reached)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self
            .lr_drop_steps
            .iter()
            .filter(|&&s| iteration >= s)
            .count();
        self.base_lr * self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    /// Alpha used at each iteration (crystal heads only).
    pub alphas: Vec<f64>,
    /// Global gradient norm at each iteration, before clipping.
    pub grad_norms: Vec<f64>,
    /// Training-set accuracy after each completed epoch.
    pub epoch_accuracy: Vec<f64>,
    pub final_alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpModel,
    pub head: CrystalHead,
    pub history: TrainHistory,
}

/// L2 norm of all parameter gradients of one step.
fn grad_norm(layers: &[LayerGrad], head: &LossBatchResult, alpha_trainable: bool) -> f64 {
    let mut sq: f64 = layers
        .iter()
        .flat_map(|g| g.weights.as_slice().iter().chain(&g.bias))
        .map(|v| v * v)
        .sum();
    sq += head
        .grad_weights
        .as_slice()
        .iter()
        .map(|v| v * v)
        .sum::<f64>();
    sq += head.grad_bias.iter().map(|v| v * v).sum::<f64>();
    if alpha_trainable {
        sq += head.grad_alpha * head.grad_alpha;
    }
    sq.sqrt()
}

/// Deterministically initializes a model and head from a seed.
pub fn init_model_and_head(
    dims: &[usize],
    num_classes: usize,
    kind: HeadKind,
    seed: u64,
) -> Result<(MlpModel, CrystalHead)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MlpModel::init(dims, &mut rng)?;
    let head = kind.init_head(num_classes, model.embedding_dim(), &mut rng)?;
    Ok((model, head))
}

/// Mini-batch SGD over shuffled epochs. Deterministic for a given seed.
pub fn train(
    model: MlpModel,
    head: CrystalHead,
    data: &LabeledSet,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.inputs.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: data.inputs.cols(),
        });
    }
    if head.feature_dim() != model.embedding_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.embedding_dim(),
            got: head.feature_dim(),
        });
    }
    if head.num_classes() != data.num_classes {
        return Err(Error::DimensionMismatch {
            expected: data.num_classes,
            got: head.num_classes(),
        });
    }
    let kind = config.head_kind;
    kind.check_head(&head)?;

    // Shuffling uses its own stream so it does not depend on how the
    // caller initialized the parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut model = model;
    let mut head = head;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();

    for iteration in 0..config.max_iters {
        if cursor >= data.len() {
            if iteration > 0 {
                history
                    .epoch_accuracy
                    .push(accuracy(&model, &head, kind, data)?);
            }
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(data.len());
        let batch = &order[cursor..end];
        cursor = end;

        let inputs = data.inputs.select_rows(batch);
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();

        let acts = model.forward_all(&inputs)?;
        let features = acts.last().expect("non-empty");
        let head_grads = kind
            .loss_and_grads(&head, features, &labels)
            .map_err(|e| match e {
                Error::NearZeroNorm { .. } => Error::DivergedLoss { iteration },
                other => other,
            })?;
        if !head_grads.loss.is_finite() {
            return Err(Error::DivergedLoss { iteration });
        }
        history.losses.push(head_grads.loss);
        if kind.is_crystal() {
            history.alphas.push(head.alpha());
        }

        let layer_grads = model.backward(&acts, &head_grads.grad_features);
        let norm = grad_norm(&layer_grads, &head_grads, head.alpha_trainable());
        history.grad_norms.push(norm);
        let mut lr = config.lr_at(iteration);
        if let Some(c) = config.max_grad_norm {
            if norm > c {
                lr *= c / norm;
            }
        }
        model.sgd_step(&layer_grads, lr);
        head = head.sgd_step(&head_grads, lr);
    }
    if cursor >= data.len() && config.max_iters > 0 {
        history
            .epoch_accuracy
            .push(accuracy(&model, &head, kind, data)?);
    }
    history.final_alpha = head.alpha();
    Ok(Trained {
        model,
        head,
        history,
    })
}

/// Fraction of samples whose arg-max logit equals the label. Ties go to the
/// lowest class index.
pub fn accuracy(
    model: &MlpModel,
    head: &CrystalHead,
    kind: HeadKind,
    data: &LabeledSet,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let features = model.forward(&data.inputs)?;
    let mut correct = 0usize;
    for (f, &label) in features.iter_rows().zip(&data.labels) {
        let logits = match kind.logits(head, f) {
            Ok(l) => l,
            // A collapsed feature carries no direction; count it as a miss.
            Err(Error::NearZeroNorm { .. }) => continue,
            Err(e) => return Err(e),
        };
        let pred = argmax(&logits);
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Raw (unnormalized) embedding features, one row per input row.
pub fn extract_features(model: &MlpModel, samples: &DenseMatrix) -> Result<DenseMatrix> {
    model.forward(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn block(&self, name: &str) -> Option<&BlockError> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Gradients below this magnitude are compared absolutely. A central
/// difference with step 1e-6 carries roundoff near `1e-10 · |L|`, so a
/// smaller floor would measure the oracle's noise rather than the gradient.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Entries per parameter block above which a seeded random subset is checked.
const FULL_CHECK_LIMIT: usize = 256;

/// Compares back-propagated gradients of the full model+head objective with
/// central finite differences of the loss.
pub fn grad_check_model(
    model: &MlpModel,
    head: &CrystalHead,
    kind: HeadKind,
    batch: &LabeledSet,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient-check batch"));
    }
    kind.check_head(head)?;
    let acts = model.forward_all(&batch.inputs)?;
    let head_grads = kind.loss_and_grads(head, acts.last().expect("non-empty"), &batch.labels)?;
    let layer_grads = model.backward(&acts, &head_grads.grad_features);

    let objective = |m: &MlpModel, h: &CrystalHead| -> Result<f64> {
        let f = m.forward(&batch.inputs)?;
        kind.loss(h, &f, &batch.labels)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut blocks = Vec::new();

    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if n > FULL_CHECK_LIMIT {
            idx.shuffle(rng);
            idx.truncate(FULL_CHECK_LIMIT);
            idx.sort_unstable();
        }
        idx
    };

    for (li, g) in layer_grads.iter().enumerate() {
        let n = g.weights.as_slice().len();
        let mut worst = 0.0f64;
        let idx = pick(n, &mut rng);
        for &k in &idx {
            let mut plus = model.clone();
            plus.layers[li].weights.as_mut_slice()[k] += eps;
            let mut minus = model.clone();
            minus.layers[li].weights.as_mut_slice()[k] -= eps;
            let numeric = (objective(&plus, head)? - objective(&minus, head)?) / (2.0 * eps);
            worst = worst.max(relative_error(g.weights.as_slice()[k], numeric));
        }
        blocks.push(BlockError {
            name: format!("layer{li}.weight"),
            max_rel_error: worst,
            checked: idx.len(),
        });

        let mut worst = 0.0f64;
        let idx = pick(g.bias.len(), &mut rng);
        for &k in &idx {
            let mut plus = model.clone();
            plus.layers[li].bias[k] += eps;
            let mut minus = model.clone();
            minus.layers[li].bias[k] -= eps;
            let numeric = (objective(&plus, head)? - objective(&minus, head)?) / (2.0 * eps);
            worst = worst.max(relative_error(g.bias[k], numeric));
        }
        blocks.push(BlockError {
            name: format!("layer{li}.bias"),
            max_rel_error: worst,
            checked: idx.len(),
        });
    }

    let mut worst = 0.0f64;
    let idx = pick(head.weights().as_slice().len(), &mut rng);
    for &k in &idx {
        let mut plus = head.clone();
        plus.weights_mut().as_mut_slice()[k] += eps;
        let mut minus = head.clone();
        minus.weights_mut().as_mut_slice()[k] -= eps;
        let numeric = (objective(model, &plus)? - objective(model, &minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(
            head_grads.grad_weights.as_slice()[k],
            numeric,
        ));
    }
    blocks.push(BlockError {
        name: "head.weight".into(),
        max_rel_error: worst,
        checked: idx.len(),
    });

    let mut worst = 0.0f64;
    let idx = pick(head.num_classes(), &mut rng);
    for &k in &idx {
        let mut plus = head.clone();
        plus.bias_mut()[k] += eps;
        let mut minus = head.clone();
        minus.bias_mut()[k] -= eps;
        let numeric = (objective(model, &plus)? - objective(model, &minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(head_grads.grad_bias[k], numeric));
    }
    blocks.push(BlockError {
        name: "head.bias".into(),
        max_rel_error: worst,
        checked: idx.len(),
    });

    if kind == HeadKind::CrystalTrainable {
        let mut plus = head.clone();
        plus.set_alpha(head.alpha() + eps)?;
        let mut minus = head.clone();
        minus.set_alpha(head.alpha() - eps)?;
        let numeric = (objective(model, &plus)? - objective(model, &minus)?) / (2.0 * eps);
        blocks.push(BlockError {
            name: "head.alpha".into(),
            max_rel_error: relative_error(head_grads.grad_alpha, numeric),
            checked: 1,
        });
    }

    Ok(GradCheckReport {
        blocks,
        tolerance: tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularSpread {
    /// Mean over classes of the mean pairwise cosine distance within a class.
    pub intra: f64,
    /// Mean cosine distance over all pairs drawn from different classes.
    pub inter: f64,
}

/// Intra- and inter-class mean cosine distance (`1 − cos`).
pub fn angular_spread(features: &DenseMatrix, labels: &[usize]) -> Result<AngularSpread> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let present: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 2 classes, found {}",
            present.len()
        )));
    }
    if let Some(m) = present.iter().find(|m| m.len() < 2) {
        return Err(Error::InsufficientSamples(format!(
            "class {} has {} sample(s), need at least 2",
            labels[m[0]],
            m.len()
        )));
    }

    let unit: Vec<DenseVector> = (0..features.rows())
        .map(|i| {
            math::l2_normalize(features.row(i)).map_err(|e| match e {
                Error::NearZeroNorm { eps, .. } => Error::NearZeroNorm { row: Some(i), eps },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let dist = |a: usize, b: usize| 1.0 - math::dot(&unit[a], &unit[b]).clamp(-1.0, 1.0);

    let mut intra_total = 0.0;
    for m in &present {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                sum += dist(i, j);
                count += 1;
            }
        }
        intra_total += sum / count as f64;
    }

    let mut inter_sum = 0.0;
    let mut inter_count = 0usize;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] != labels[j] {
                inter_sum += dist(i, j);
                inter_count += 1;
            }
        }
    }

    Ok(AngularSpread {
        intra: intra_total / present.len() as f64,
        inter: inter_sum / inter_count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn blobs(centers: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push([
                    center[0] + rng.random_range(-spread..spread),
                    center[1] + rng.random_range(-spread..spread),
                ]);
                labels.push(c);
            }
        }
        LabeledSet::new(
            DenseMatrix::from_rows(&rows).unwrap(),
            labels,
            centers.len(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_separates_two_blobs() {
        let data = blobs(&[[2.0, 2.0], [-2.0, -2.0]], 100, 1.0, 1);
        let (model, head) = init_model_and_head(&[2, 64, 64, 2], 2, HeadKind::Softmax, 5).unwrap();
        let config = TrainConfig {
            batch_size: 32,
            max_iters: 500,
            head_kind: HeadKind::Softmax,
            ..TrainConfig::default()
        };
        let out = train(model, head, &data, &config).unwrap();
        let acc = accuracy(&out.model, &out.head, HeadKind::Softmax, &data).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn crystal_separates_three_blobs() {
        let data = blobs(&[[3.0, 0.0], [-1.5, 2.6], [-1.5, -2.6]], 70, 1.0, 2);
        let kind = HeadKind::CrystalFixed(4.0);
        let (model, head) = init_model_and_head(&[2, 64, 64, 2], 3, kind, 6).unwrap();
        let config = TrainConfig {
            batch_size: 32,
            max_iters: 500,
            head_kind: kind,
            ..TrainConfig::default()
        };
        let out = train(model, head, &data, &config).unwrap();
        assert_eq!(accuracy(&out.model, &out.head, kind, &data).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]], 30, 0.5, 3);
        let kind = HeadKind::CrystalTrainable;
        let run = || {
            let (model, head) = init_model_and_head(&[2, 8, 2], 3, kind, 9).unwrap();
            let config = TrainConfig {
                batch_size: 16,
                max_iters: 60,
                head_kind: kind,
                lr_drop_steps: vec![30],
                ..TrainConfig::default()
            };
            train(model, head, &data, &config).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert!(a.history.final_alpha > 0.0);
        assert_eq!(a.history.losses.len(), 60);
        assert_eq!(a.history.alphas.len(), 60);
        // 90 samples / 16 per batch = 6 iterations per epoch.
        assert_eq!(a.history.epoch_accuracy.len(), 10);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let data = blobs(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]], 30, 0.5, 4);
        let kind = HeadKind::CrystalTrainable;
        let params = |m: &MlpModel, h: &CrystalHead| -> Vec<f64> {
            let mut v = Vec::new();
            for l in m.layers() {
                v.extend_from_slice(l.weights.as_slice());
                v.extend_from_slice(l.bias.as_slice());
            }
            v.extend_from_slice(h.weights().as_slice());
            v.extend_from_slice(h.bias().as_slice());
            v.push(h.alpha());
            v
        };
        let (model, head) = init_model_and_head(&[2, 8, 2], 3, kind, 9).unwrap();
        let before = params(&model, &head);
        let config = TrainConfig {
            batch_size: 16,
            max_iters: 1,
            head_kind: kind,
            max_grad_norm: Some(1e-3),
            ..TrainConfig::default()
        };
        let out = train(model, head, &data, &config).unwrap();
        assert!(out.history.grad_norms[0] > 1e-3);
        let step: f64 = params(&out.model, &out.head)
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(step, config.base_lr * 1e-3, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                base_lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_drop_factor: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_drop_steps: vec![5, 5],
                ..TrainConfig::default()
            },
            TrainConfig {
                head_kind: HeadKind::CrystalFixed(0.0),
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let c = TrainConfig {
            base_lr: 0.1,
            lr_drop_steps: vec![10, 20],
            lr_drop_factor: 0.1,
            ..TrainConfig::default()
        };
        assert_abs_diff_eq!(c.lr_at(9), 0.1);
        assert_abs_diff_eq!(c.lr_at(10), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(c.lr_at(25), 0.001, epsilon = 1e-15);
    }

    #[test]
    fn trainable_kind_refuses_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(HeadKind::CrystalTrainable
            .init_head(2, 2, &mut rng)
            .is_err());
    }

    #[test]
    fn extract_identity_and_order() {
        let model = MlpModel::identity(3);
        let x = DenseMatrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]).unwrap();
        let f = extract_features(&model, &x).unwrap();
        assert_eq!(f, x);
        assert!(extract_features(&model, &DenseMatrix::zeros(1, 2)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = MlpModel::init(&[3, 5, 2], &mut rng).unwrap();
        let a = extract_features(&model, &x).unwrap();
        let b = extract_features(&model, &x).unwrap();
        assert_eq!(a.rows(), 2);
        assert_eq!(a, b);
        let second = extract_features(&model, &x.select_rows(&[1])).unwrap();
        assert_eq!(second.row(0), a.row(1));
    }

    #[test]
    fn model_rejects_bad_layers() {
        let layer = |o: usize, i: usize, act| Layer {
            weights: DenseMatrix::zeros(o, i),
            bias: DenseVector::zeros(o),
            activation: act,
        };
        assert!(MlpModel::new(vec![]).is_err());
        assert!(MlpModel::new(vec![layer(2, 2, Activation::Relu)]).is_err());
        assert!(MlpModel::new(vec![
            layer(3, 2, Activation::Relu),
            layer(2, 4, Activation::Identity)
        ])
        .is_err());
    }

    #[test]
    fn grad_check_tiny_models() {
        let data = blobs(&[[1.0, 0.5], [-0.5, 1.0]], 4, 0.5, 8);
        for kind in [HeadKind::Softmax, HeadKind::CrystalFixed(3.0)] {
            let (model, head) = init_model_and_head(&[2, 4, 2], 2, kind, 21).unwrap();
            let report = grad_check_model(&model, &head, kind, &data, 1e-6, 1e-5).unwrap();
            assert!(report.passed(), "{kind:?}: {report:?}");
            assert!(report.block("head.alpha").is_none());
        }
    }

    #[test]
    fn grad_check_includes_alpha_when_trainable() {
        let data = blobs(&[[1.0, 0.5], [-0.5, 1.0], [0.0, -1.0]], 3, 0.5, 8);
        let kind = HeadKind::CrystalTrainable;
        let (model, head) = init_model_and_head(&[2, 8, 2], 3, kind, 23).unwrap();
        let report = grad_check_model(&model, &head, kind, &data, 1e-6, 1e-5).unwrap();
        assert!(report.block("head.alpha").is_some());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn spread_examples() {
        let f = DenseMatrix::from_rows(&[[1.0, 1.0]; 4]).unwrap();
        let s = angular_spread(&f, &[0, 0, 1, 1]).unwrap();
        assert_abs_diff_eq!(s.intra, 0.0, epsilon = 1e-15);

        let f = DenseMatrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]]).unwrap();
        let s = angular_spread(&f, &[0, 0, 1, 1]).unwrap();
        assert_abs_diff_eq!(s.intra, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.inter, 1.0, epsilon = 1e-15);

        assert!(matches!(
            angular_spread(&f, &[0, 0, 0, 0]),
            Err(Error::InsufficientSamples(_))
        ));
        assert!(matches!(
            angular_spread(&f, &[0, 0, 0, 1]),
            Err(Error::InsufficientSamples(_))
        ));
    }
}
