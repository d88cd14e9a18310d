//! Dense vector/matrix primitives and the differentiable building blocks of
//! the normalize-then-scale feature head: L2 normalization (with its
//! Jacobian-vector product), scaling, stabilized softmax cross-entropy and
//! cosine similarity.
//!
//! Everything here is a pure function over `f64` data.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Norms at or below this are rejected instead of normalized.
pub const EPS_NORM: f64 = 1e-12;

/// A real-valued vector of dimension at least one with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(DenseVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    /// Wraps values produced by internal arithmetic without re-validating.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        DenseVector::new(values)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        DenseMatrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · v` for a vector of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.iter_rows().map(|r| dot(r, v)).collect()
    }

    /// `selfᵀ · v` for a vector of length `rows`.
    pub fn mul_vec_transposed(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vi) in self.iter_rows().zip(v) {
            for (o, &w) in out.iter_mut().zip(r) {
                *o += w * vi;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn checked_norm(x: &[f64]) -> Result<f64> {
    let n = norm(x);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(Error::NearZeroNorm {
            row: None,
            eps: EPS_NORM,
        });
    }
    Ok(n)
}

/// Projects `x` onto the unit sphere.
pub fn l2_normalize(x: &[f64]) -> Result<DenseVector> {
    let n = checked_norm(x)?;
    Ok(DenseVector::from_raw(x.iter().map(|v| v / n).collect()))
}

/// Multiplies a (unit) vector by the hypersphere radius `alpha`.
pub fn scale(y: &[f64], alpha: f64) -> Result<DenseVector> {
    if !(alpha > 0.0) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    Ok(DenseVector::from_raw(y.iter().map(|v| alpha * v).collect()))
}

/// Back-propagates `grad_y = ∂l/∂y` through `y = x / ‖x‖`.
///
/// The Jacobian is `J = (I − y yᵀ) / ‖x‖`, i.e. diagonal entries
/// `(‖x‖² − x_i²) / ‖x‖³` and off-diagonal entries `−x_i x_j / ‖x‖³`. It is
/// symmetric, so `Jᵀ grad_y = (grad_y − y (yᵀ grad_y)) / ‖x‖`.
pub fn l2_normalize_backward(x: &[f64], grad_y: &[f64]) -> Result<DenseVector> {
    if grad_y.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: grad_y.len(),
        });
    }
    let n = checked_norm(x)?;
    let n3 = n * n * n;
    let radial = dot(x, grad_y);
    Ok(DenseVector::from_raw(
        x.iter()
            .zip(grad_y)
            .map(|(&xi, &gi)| (gi * n * n - xi * radial) / n3)
            .collect(),
    ))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Per-sample softmax cross-entropy: returns `−log softmax(logits)[label]`
/// and its gradient `softmax(logits) − onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, DenseVector)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&s| (s - max).exp()).sum();
    let log_z = max + total.ln();
    let loss = (log_z - logits[label]).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|&s| (s - log_z).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, DenseVector::from_raw(grad)))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn finite_diff_normalize(x: &[f64], grad_y: &[f64], h: f64) -> Vec<f64> {
        // grad_x_i = Σ_j grad_y_j ∂y_j/∂x_i, column i by central differences.
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                let yp = l2_normalize(&xp).unwrap();
                let ym = l2_normalize(&xm).unwrap();
                grad_y
                    .iter()
                    .zip(yp.iter().zip(ym.iter()))
                    .map(|(g, (p, m))| g * (p - m) / (2.0 * h))
                    .sum()
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn normalize_examples() {
        let y = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(y[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 0.8, epsilon = 1e-15);
        assert_eq!(
            l2_normalize(&[1.0, 0.0, 0.0]).unwrap().as_slice(),
            &[1.0, 0.0, 0.0]
        );
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::NearZeroNorm { .. })
        ));
    }

    #[test]
    fn scale_examples() {
        let z = scale(&[0.6, 0.8], 50.0).unwrap();
        assert_abs_diff_eq!(z[0], 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], 40.0, epsilon = 1e-12);
        assert_eq!(scale(&[1.0, 0.0], 1.0).unwrap().as_slice(), &[1.0, 0.0]);
        let z = scale(&[0.6, 0.8], 16.0).unwrap();
        assert_abs_diff_eq!(z[0], 9.6, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], 12.8, epsilon = 1e-12);
        assert!(matches!(
            scale(&[1.0], 0.0),
            Err(Error::NonPositiveAlpha(_))
        ));
        assert!(matches!(
            scale(&[1.0], -2.0),
            Err(Error::NonPositiveAlpha(_))
        ));
    }

    #[test]
    fn normalize_backward_examples() {
        let g = l2_normalize_backward(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 1.0]);
        let g = l2_normalize_backward(&[2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        assert!(matches!(
            l2_normalize_backward(&[1.0, 0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            l2_normalize_backward(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::NearZeroNorm { .. })
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &d in &[2usize, 5, 64] {
            for _ in 0..100 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let analytic = l2_normalize_backward(&x, &g).unwrap();
                let numeric = finite_diff_normalize(&x, &g, 1e-6);
                for (a, n) in analytic.iter().zip(&numeric) {
                    assert!(rel_err(*a, *n) < 1e-5, "d={d}: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn normalization_jacobian_is_symmetric_and_annihilates_x() {
        let x = [0.3, -1.2, 2.5, 0.7];
        let d = x.len();
        // Column j of J is J·e_j; J symmetric means Jᵀe_j equals it.
        let mut jac = vec![vec![0.0; d]; d];
        for (j, col) in jac.iter_mut().enumerate() {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            *col = l2_normalize_backward(&x, &e).unwrap().into_vec();
        }
        for i in 0..d {
            for j in 0..d {
                assert_abs_diff_eq!(jac[i][j], jac[j][i], epsilon = 1e-14);
            }
        }
        let jx = l2_normalize_backward(&x, &x).unwrap();
        for v in jx.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], 0.5, epsilon = 1e-12);

        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));

        let (loss, _) = softmax_cross_entropy(&[1.0, 0.0], 0).unwrap();
        assert_abs_diff_eq!(loss, 0.31326168751822286, epsilon = 1e-12);

        assert!(matches!(
            softmax_cross_entropy(&[1.0, 0.0], 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dense_vector_rejects_bad_input() {
        assert!(DenseVector::new(vec![]).is_err());
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..16)
            .prop_filter("norm bounded away from zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(x in nonzero_vec(), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let a = l2_normalize(&x).unwrap();
            let b = l2_normalize(&scaled).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }

        #[test]
        fn scaled_unit_has_norm_alpha(x in nonzero_vec(), alpha in 0.01f64..100.0) {
            let z = scale(&l2_normalize(&x).unwrap(), alpha).unwrap();
            prop_assert!((norm(&z) - alpha).abs() <= 1e-10);
            let y = l2_normalize(&x).unwrap();
            prop_assert!((norm(&y) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn cosine_is_rescaling_invariant(
            (a, b) in (1usize..10).prop_flat_map(|d| (
                prop::collection::vec(-10.0f64..10.0, d),
                prop::collection::vec(-10.0f64..10.0, d),
            )).prop_filter("nonzero", |(a, b)| norm(a) > 1e-3 && norm(b) > 1e-3),
            c1 in 1e-2f64..1e2,
            c2 in 1e-2f64..1e2,
        ) {
            let s = cosine_similarity(&a, &b).unwrap();
            let a2: Vec<f64> = a.iter().map(|v| v * c1).collect();
            let b2: Vec<f64> = b.iter().map(|v| v * c2).collect();
            let s2 = cosine_similarity(&a2, &b2).unwrap();
            prop_assert!((s - s2).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
