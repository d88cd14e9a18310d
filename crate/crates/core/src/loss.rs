//! The L2-constrained softmax ("crystal") classifier head.
//!
//! Features are projected onto a hypersphere of radius `alpha` before the
//! linear classifier: `z = alpha * f / ‖f‖`, `logits = W z + b`, followed by
//! softmax cross-entropy. Classifier weights are left unnormalized.
//!
//! Also provides the plain softmax head used as a baseline and the closed-form
//! relation between `alpha`, the class count and the average probability of
//! the correct class.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, DenseMatrix, DenseVector};

/// Trainable alpha is never allowed below this after an update.
pub const MIN_TRAINABLE_ALPHA: f64 = 0.1;

/// Target probability used to seed a trainable alpha from [`alpha_lower_bound`].
pub const DEFAULT_BOUND_PROBABILITY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct CrystalHead {
    weights: DenseMatrix,
    bias: DenseVector,
    alpha: f64,
    alpha_trainable: bool,
}

/// Mean loss over a batch and the gradients of that mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatchResult {
    pub loss: f64,
    /// `M × D`, one row per input feature.
    pub grad_features: DenseMatrix,
    /// `C × D`
    pub grad_weights: DenseMatrix,
    pub grad_bias: DenseVector,
    /// Always computed for the crystal head; zero for the plain head.
    pub grad_alpha: f64,
}

impl CrystalHead {
    pub fn new(
        weights: DenseMatrix,
        bias: DenseVector,
        alpha: f64,
        alpha_trainable: bool,
    ) -> Result<Self> {
        if bias.dim() != weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: weights.rows(),
                got: bias.dim(),
            });
        }
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::Empty("classifier weights"));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::NonPositiveAlpha(alpha));
        }
        Ok(CrystalHead {
            weights,
            bias,
            alpha,
            alpha_trainable,
        })
    }

    /// Zero bias and weights drawn from `U(-√(6/(C+D)), √(6/(C+D)))`.
    pub fn init<R: Rng + ?Sized>(
        num_classes: usize,
        feature_dim: usize,
        alpha: f64,
        alpha_trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::Empty("classifier weights"));
        }
        let limit = (6.0 / (num_classes + feature_dim) as f64).sqrt();
        let data = (0..num_classes * feature_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        CrystalHead::new(
            DenseMatrix::new(num_classes, feature_dim, data)?,
            DenseVector::zeros(num_classes),
            alpha,
            alpha_trainable,
        )
    }

    /// A trainable head whose alpha starts at the lower bound for p = 0.9.
    pub fn init_trainable<R: Rng + ?Sized>(
        num_classes: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let alpha = alpha_lower_bound(num_classes, DEFAULT_BOUND_PROBABILITY)?;
        if !(alpha > 0.0) {
            return Err(Error::NonPositiveAlpha(alpha));
        }
        CrystalHead::init(num_classes, feature_dim, alpha, true, rng)
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn bias(&self) -> &DenseVector {
        &self.bias
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn alpha_trainable(&self) -> bool {
        self.alpha_trainable
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Mutable access for perturbation-based checks and optimizers.
    pub fn weights_mut(&mut self) -> &mut DenseMatrix {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut DenseVector {
        &mut self.bias
    }

    /// Sets alpha directly; fails on non-positive values.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::NonPositiveAlpha(alpha));
        }
        self.alpha = alpha;
        Ok(())
    }

    /// One SGD step. Alpha only moves when trainable, and is clamped to
    /// [`MIN_TRAINABLE_ALPHA`].
    pub fn sgd_step(&self, grads: &LossBatchResult, lr: f64) -> CrystalHead {
        let mut next = self.clone();
        for (w, g) in next
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(grads.grad_weights.as_slice())
        {
            *w -= lr * g;
        }
        for (b, g) in next.bias.iter_mut().zip(grads.grad_bias.iter()) {
            *b -= lr * g;
        }
        if self.alpha_trainable {
            next.alpha = (self.alpha - lr * grads.grad_alpha).max(MIN_TRAINABLE_ALPHA);
        }
        next
    }

    /// Logits `W (alpha f/‖f‖) + b` for a single feature vector.
    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.feature_dim(), feature.len())?;
        let z = math::scale(&math::l2_normalize(feature)?, self.alpha)?;
        Ok(add_bias(self.weights.mul_vec(&z), &self.bias))
    }

    pub fn forward(&self, features: &DenseMatrix, labels: &[usize]) -> Result<f64> {
        crystal_forward(self, features, labels)
    }

    pub fn backward(&self, features: &DenseMatrix, labels: &[usize]) -> Result<LossBatchResult> {
        crystal_backward(self, features, labels)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn add_bias(mut logits: Vec<f64>, bias: &[f64]) -> Vec<f64> {
    for (s, b) in logits.iter_mut().zip(bias) {
        *s += b;
    }
    logits
}

fn check_batch(
    weights: &DenseMatrix,
    bias: &[f64],
    features: &DenseMatrix,
    labels: &[usize],
) -> Result<()> {
    check_dim(weights.rows(), bias.len())?;
    check_dim(weights.cols(), features.cols())?;
    check_dim(features.rows(), labels.len())?;
    if features.rows() == 0 {
        return Err(Error::Empty("feature batch"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= weights.rows()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: weights.rows(),
        });
    }
    Ok(())
}

fn normalized_row(features: &DenseMatrix, i: usize) -> Result<DenseVector> {
    math::l2_normalize(features.row(i)).map_err(|e| match e {
        Error::NearZeroNorm { eps, .. } => Error::NearZeroNorm { row: Some(i), eps },
        other => other,
    })
}

/// Mean softmax cross-entropy of the head applied to features constrained to
/// norm `alpha`.
pub fn crystal_forward(
    head: &CrystalHead,
    features: &DenseMatrix,
    labels: &[usize],
) -> Result<f64> {
    check_batch(&head.weights, &head.bias, features, labels)?;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let y = normalized_row(features, i)?;
        let z = math::scale(&y, head.alpha)?;
        let logits = add_bias(head.weights.mul_vec(&z), &head.bias);
        total += math::softmax_cross_entropy(&logits, label)?.0;
    }
    Ok(total / labels.len() as f64)
}

/// Loss and exact gradients of [`crystal_forward`].
///
/// Per sample, with `g_s = softmax(s) − onehot` at the logits:
/// `∂l/∂z = Wᵀ g_s`, `∂l/∂alpha = Σ_j ∂l/∂z_j · y_j`, `∂l/∂y = alpha · ∂l/∂z`,
/// and `∂l/∂f` follows through the normalization Jacobian.
pub fn crystal_backward(
    head: &CrystalHead,
    features: &DenseMatrix,
    labels: &[usize],
) -> Result<LossBatchResult> {
    check_batch(&head.weights, &head.bias, features, labels)?;
    let m = labels.len();
    let inv_m = 1.0 / m as f64;
    let (c, d) = (head.num_classes(), head.feature_dim());

    let mut loss = 0.0;
    let mut grad_features = DenseMatrix::zeros(m, d);
    let mut grad_weights = DenseMatrix::zeros(c, d);
    let mut grad_bias = vec![0.0; c];
    let mut grad_alpha = 0.0;

    for (i, &label) in labels.iter().enumerate() {
        let y = normalized_row(features, i)?;
        let z = math::scale(&y, head.alpha)?;
        let logits = add_bias(head.weights.mul_vec(&z), &head.bias);
        let (l, mut g_logits) = math::softmax_cross_entropy(&logits, label)?;
        loss += l;
        for g in g_logits.iter_mut() {
            *g *= inv_m;
        }

        for (k, &gk) in g_logits.iter().enumerate() {
            grad_bias[k] += gk;
            for (gw, &zj) in grad_weights.row_mut(k).iter_mut().zip(z.iter()) {
                *gw += gk * zj;
            }
        }

        let g_z = head.weights.mul_vec_transposed(&g_logits);
        grad_alpha += math::dot(&g_z, &y);
        let g_y: Vec<f64> = g_z.iter().map(|g| g * head.alpha).collect();
        let g_f = math::l2_normalize_backward(features.row(i), &g_y)?;
        grad_features.row_mut(i).copy_from_slice(&g_f);
    }

    Ok(LossBatchResult {
        loss: loss * inv_m,
        grad_features,
        grad_weights,
        grad_bias: DenseVector::from_raw(grad_bias),
        grad_alpha,
    })
}

/// Logits of the unconstrained baseline head.
pub fn plain_logits(weights: &DenseMatrix, bias: &[f64], feature: &[f64]) -> Result<Vec<f64>> {
    check_dim(weights.cols(), feature.len())?;
    check_dim(weights.rows(), bias.len())?;
    Ok(add_bias(weights.mul_vec(feature), bias))
}

/// Loss and gradients of the plain softmax head `W f + b` (no normalization).
pub fn plain_softmax_forward_backward(
    weights: &DenseMatrix,
    bias: &[f64],
    features: &DenseMatrix,
    labels: &[usize],
) -> Result<LossBatchResult> {
    check_batch(weights, bias, features, labels)?;
    let m = labels.len();
    let inv_m = 1.0 / m as f64;
    let (c, d) = (weights.rows(), weights.cols());

    let mut loss = 0.0;
    let mut grad_features = DenseMatrix::zeros(m, d);
    let mut grad_weights = DenseMatrix::zeros(c, d);
    let mut grad_bias = vec![0.0; c];

    for (i, &label) in labels.iter().enumerate() {
        let f = features.row(i);
        let logits = add_bias(weights.mul_vec(f), bias);
        let (l, mut g_logits) = math::softmax_cross_entropy(&logits, label)?;
        loss += l;
        for g in g_logits.iter_mut() {
            *g *= inv_m;
        }
        for (k, &gk) in g_logits.iter().enumerate() {
            grad_bias[k] += gk;
            for (gw, &fj) in grad_weights.row_mut(k).iter_mut().zip(f) {
                *gw += gk * fj;
            }
        }
        let g_f = weights.mul_vec_transposed(&g_logits);
        grad_features.row_mut(i).copy_from_slice(&g_f);
    }

    Ok(LossBatchResult {
        loss: loss * inv_m,
        grad_features,
        grad_weights,
        grad_bias: DenseVector::from_raw(grad_bias),
        grad_alpha: 0.0,
    })
}

/// Average probability of the correct class when unit classifier weights point
/// at class centres 90° apart on a circle of radius `alpha`.
///
/// With `exact4` the four-class value `e^α / (e^α + 2 + e^{-α})` is returned
/// (requires `C = 4`); otherwise the `C`-class generalization
/// `e^α / (e^α + C − 2)`.
pub fn avg_class_probability(alpha: f64, num_classes: usize, exact4: bool) -> Result<f64> {
    if num_classes < 3 {
        return Err(Error::InvalidClassCount {
            count: num_classes,
            reason: "at least 3 classes required",
        });
    }
    if exact4 && num_classes != 4 {
        return Err(Error::InvalidClassCount {
            count: num_classes,
            reason: "the exact form is only defined for 4 classes",
        });
    }
    if !(alpha >= 0.0) {
        return Err(Error::NegativeAlpha(alpha));
    }
    let e = (-alpha).exp();
    let p = if exact4 {
        1.0 / (1.0 + 2.0 * e + e * e)
    } else {
        1.0 / (1.0 + (num_classes - 2) as f64 * e)
    };
    Ok(p)
}

/// Smallest alpha for which the `C`-class average probability reaches `p`:
/// `ln(p (C − 2) / (1 − p))`.
pub fn alpha_lower_bound(num_classes: usize, p: f64) -> Result<f64> {
    if num_classes < 3 {
        return Err(Error::InvalidClassCount {
            count: num_classes,
            reason: "the bound is undefined below 3 classes",
        });
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    Ok((p * (num_classes - 2) as f64 / (1.0 - p)).ln())
}
