//! von Mises–Fisher distributions on the unit hypersphere: density, sampling,
//! the MAP classification loss under class-conditional vMF features, and the
//! synthetic datasets built from them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::aggregation::{MediaItem, Template};
use crate::error::{Error, Result};
use crate::math::{self, DenseMatrix, DenseVector};
use crate::trainer::LabeledSet;

const UNIT_TOL_DENSITY: f64 = 1e-6;
const UNIT_TOL_MEAN: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct VmfDistribution {
    mu: DenseVector,
    kappa: f64,
}

/// Log-density value, flagged when the normalizing constant was omitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    pub normalized: bool,
}

impl VmfDistribution {
    pub fn new(mu: DenseVector, kappa: f64) -> Result<Self> {
        if mu.dim() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: mu.dim(),
            });
        }
        let n = math::norm(&mu);
        if (n - 1.0).abs() > UNIT_TOL_MEAN {
            return Err(Error::NotUnitVector { norm: n });
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::NegativeAlpha(kappa));
        }
        Ok(VmfDistribution { mu, kappa })
    }

    pub fn mu(&self) -> &DenseVector {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// `ln C_3(κ) = ln(κ / (4π sinh κ))`, evaluated stably for small and large κ.
    pub fn log_normalizer_p3(kappa: f64) -> f64 {
        let log_ratio = if kappa < 1e-6 {
            // κ / sinh κ = 1 − κ²/6 + O(κ⁴)
            -kappa * kappa / 6.0
        } else {
            // ln sinh κ = κ + ln(1 − e^{−2κ}) − ln 2
            kappa.ln() - (kappa + (-(-2.0 * kappa).exp()).ln_1p() - std::f64::consts::LN_2)
        };
        log_ratio - (4.0 * PI).ln()
    }

    /// `ln C_p + κ μᵀx` for p = 3; for other dimensions only `κ μᵀx` is
    /// returned and flagged as unnormalized.
    pub fn log_density(&self, x: &[f64]) -> Result<LogDensity> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let n = math::norm(x);
        if (n - 1.0).abs() > UNIT_TOL_DENSITY {
            return Err(Error::NotUnitVector { norm: n });
        }
        let kernel = self.kappa * math::dot(&self.mu, x);
        Ok(if self.dim() == 3 {
            LogDensity {
                value: Self::log_normalizer_p3(self.kappa) + kernel,
                normalized: true,
            }
        } else {
            LogDensity {
                value: kernel,
                normalized: false,
            }
        })
    }

    /// Draws `n` unit vectors: the component along μ by Wood's rejection
    /// scheme, the tangential part uniformly on the orthogonal sphere.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DenseMatrix {
        let p = self.dim();
        let mut out = DenseMatrix::zeros(n, p);
        for i in 0..n {
            let row = self.sample_one(rng);
            out.row_mut(i).copy_from_slice(&row);
        }
        out
    }

    pub fn sample_seeded(&self, n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample(n, &mut rng)
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.dim();
        let w = sample_cosine(self.kappa, p, rng);
        let tangent = loop {
            let mut v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
            let along = math::dot(&v, &self.mu);
            for (vi, mi) in v.iter_mut().zip(self.mu.iter()) {
                *vi -= along * mi;
            }
            let norm = math::norm(&v);
            if norm > 1e-8 {
                v.iter_mut().for_each(|vi| *vi /= norm);
                break v;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let mut x: Vec<f64> = self
            .mu
            .iter()
            .zip(&tangent)
            .map(|(m, t)| w * m + s * t)
            .collect();
        let norm = math::norm(&x);
        x.iter_mut().for_each(|xi| *xi /= norm);
        x
    }
}

/// Samples `w = μᵀx` for a vMF in `p` dimensions (Wood, 1994).
fn sample_cosine<R: Rng + ?Sized>(kappa: f64, p: usize, rng: &mut R) -> f64 {
    let m1 = (p - 1) as f64;
    // b = (−2κ + √(4κ² + (p−1)²)) / (p−1), rewritten to avoid cancellation.
    let b = m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(m1 / 2.0, m1 / 2.0).expect("positive shape parameters");
    loop {
        let z: f64 = beta.sample(rng);
        let u: f64 = rng.random();
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        if kappa * w + m1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return w.clamp(-1.0, 1.0);
        }
    }
}

/// Mean over the batch of `−log( e^{κ μ_yᵀx} / Σ_j e^{κ μ_jᵀx} )` for unit
/// features and unit class means.
pub fn vmf_map_loss(
    features: &DenseMatrix,
    class_mus: &DenseMatrix,
    kappa: f64,
    labels: &[usize],
) -> Result<f64> {
    if features.cols() != class_mus.cols() {
        return Err(Error::DimensionMismatch {
            expected: class_mus.cols(),
            got: features.cols(),
        });
    }
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("feature batch"));
    }
    for row in features.iter_rows().chain(class_mus.iter_rows()) {
        let n = math::norm(row);
        if (n - 1.0).abs() > UNIT_TOL_DENSITY {
            return Err(Error::NotUnitVector { norm: n });
        }
    }
    let mut total = 0.0;
    for (x, &label) in features.iter_rows().zip(labels) {
        let scores: Vec<f64> = class_mus
            .iter_rows()
            .map(|mu| kappa * math::dot(mu, x))
            .collect();
        total += math::softmax_cross_entropy(&scores, label)?.0;
    }
    Ok(total / labels.len() as f64)
}

/// Quality proxy attached to synthetic samples: `σ(5 cos θ + 1)`.
pub fn synthetic_detection_score(cos_to_mean: f64) -> f64 {
    1.0 / (1.0 + (-(5.0 * cos_to_mean + 1.0)).exp())
}

/// `count` unit directions in `dim` dimensions. Orthonormal when
/// `count ≤ dim`, otherwise independent uniform directions.
pub fn random_directions<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(count, dim);
    for i in 0..count {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if count <= dim {
                for j in 0..i {
                    let prev = out.row(j).to_vec();
                    let proj = math::dot(&v, &prev);
                    for (vk, pk) in v.iter_mut().zip(&prev) {
                        *vk -= proj * pk;
                    }
                }
            }
            let n = math::norm(&v);
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                out.row_mut(i).copy_from_slice(&v);
                break;
            }
        }
    }
    out
}

/// Class-conditional vMF samples with synthetic detection scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub class_means: DenseMatrix,
    pub samples: LabeledSet,
    pub detection_scores: Vec<f64>,
}

impl SyntheticDataset {
    /// Deterministic split: within each class the first `train_per_class`
    /// samples go to the first set, the rest to the second.
    pub fn split(&self, train_per_class: usize) -> (LabeledSet, LabeledSet) {
        let mut seen = vec![0usize; self.samples.num_classes];
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &l) in self.samples.labels.iter().enumerate() {
            if seen[l] < train_per_class {
                train.push(i);
            } else {
                test.push(i);
            }
            seen[l] += 1;
        }
        (self.samples.subset(&train), self.samples.subset(&test))
    }
}

/// `num_classes` vMF clusters of `per_class` unit samples each in `dim`
/// dimensions, ordered class by class.
pub fn make_synthetic_dataset(
    num_classes: usize,
    dim: usize,
    kappa: f64,
    per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidClassCount {
            count: num_classes,
            reason: "a synthetic dataset needs at least 2 classes",
        });
    }
    if dim < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = random_directions(num_classes, dim, &mut rng);
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    let mut scores = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let dist = VmfDistribution::new(DenseVector::new(means.row(c).to_vec())?, kappa)?;
        let samples = dist.sample(per_class, &mut rng);
        for x in samples.iter_rows() {
            scores.push(synthetic_detection_score(math::dot(x, means.row(c))));
            data.extend_from_slice(x);
            labels.push(c);
        }
    }
    Ok(SyntheticDataset {
        class_means: means,
        samples: LabeledSet::new(
            DenseMatrix::new(labels.len(), dim, data)?,
            labels,
            num_classes,
        )?,
        detection_scores: scores,
    })
}

/// Settings for synthetic templates whose feature noise depends on a latent
/// per-item quality.
///
/// Each item draws a quality `q ~ U(0, 1)`. Items with `q ≥ low_quality_cut`
/// are vMF samples around their subject's mean with concentration
/// `kappa_min + (kappa_max − kappa_min) q`. Items below the cut are
/// noise-dominated: a vMF sample around a direction shared by all
/// low-quality items (`nuisance_kappa`), which makes poor-quality impostor
/// pairs look alike. Detection scores are `σ(score_gain (q − ½) + ε)` with
/// `ε ~ N(0, score_noise²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTemplateConfig {
    pub subjects: usize,
    pub dim: usize,
    pub templates_per_subject: usize,
    pub items_per_template: usize,
    pub media_per_template: usize,
    pub kappa_min: f64,
    pub kappa_max: f64,
    /// Probability that a whole template is captured in poor conditions, in
    /// which case every item's quality is drawn below the cut.
    pub poor_template_rate: f64,
    pub low_quality_cut: f64,
    pub nuisance_kappa: f64,
    pub score_gain: f64,
    pub score_noise: f64,
    pub seed: u64,
}

impl Default for QualityTemplateConfig {
    fn default() -> Self {
        QualityTemplateConfig {
            subjects: 40,
            dim: 32,
            templates_per_subject: 3,
            items_per_template: 6,
            media_per_template: 2,
            kappa_min: 8.0,
            kappa_max: 80.0,
            poor_template_rate: 0.15,
            low_quality_cut: 0.2,
            nuisance_kappa: 30.0,
            score_gain: 6.0,
            score_noise: 0.5,
            seed: 0,
        }
    }
}

/// Generates templates with subject ids `s{k}` and template ids `s{k}_t{j}`.
pub fn make_quality_templates(config: &QualityTemplateConfig) -> Result<Vec<Template>> {
    if config.subjects < 2 || config.templates_per_subject == 0 || config.items_per_template == 0 {
        return Err(Error::InvalidConfig(
            "quality templates need ≥2 subjects and nonempty templates".into(),
        ));
    }
    if config.media_per_template == 0 || config.dim < 2 {
        return Err(Error::InvalidConfig(
            "media_per_template must be ≥1 and dim ≥2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means = random_directions(config.subjects + 1, config.dim, &mut rng);
    let nuisance = VmfDistribution::new(
        DenseVector::new(means.row(config.subjects).to_vec())?,
        config.nuisance_kappa,
    )?;
    let mut templates = Vec::new();
    for s in 0..config.subjects {
        let mu = DenseVector::new(means.row(s).to_vec())?;
        for t in 0..config.templates_per_subject {
            let poor = rng.random::<f64>() < config.poor_template_rate;
            let mut items = Vec::with_capacity(config.items_per_template);
            for i in 0..config.items_per_template {
                let q: f64 = if poor {
                    rng.random::<f64>() * config.low_quality_cut
                } else {
                    rng.random()
                };
                let feature = if q < config.low_quality_cut {
                    nuisance.sample(1, &mut rng).row(0).to_vec()
                } else {
                    let kappa = config.kappa_min + (config.kappa_max - config.kappa_min) * q;
                    VmfDistribution::new(mu.clone(), kappa)?
                        .sample(1, &mut rng)
                        .row(0)
                        .to_vec()
                };
                let noise: f64 = StandardNormal.sample(&mut rng);
                let logit = config.score_gain * (q - 0.5) + config.score_noise * noise;
                let score = 1.0 / (1.0 + (-logit).exp());
                items.push(MediaItem::new(
                    format!("m{}", i % config.media_per_template),
                    DenseVector::new(feature)?,
                    score,
                )?);
            }
            templates.push(Template::new(format!("s{s}_t{t}"), format!("s{s}"), items)?);
        }
    }
    Ok(templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(v: &[f64]) -> DenseVector {
        math::l2_normalize(v).unwrap()
    }

    #[test]
    fn density_examples() {
        let d = VmfDistribution::new(unit(&[0.0, 0.0, 1.0]), 0.0).unwrap();
        for x in [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]] {
            let ld = d.log_density(&x).unwrap();
            assert!(ld.normalized);
            assert_abs_diff_eq!(ld.value, (1.0 / (4.0 * PI)).ln(), epsilon = 1e-12);
        }

        let d = VmfDistribution::new(unit(&[0.0, 0.0, 1.0]), 1.0).unwrap();
        let expected = (1.0 / (4.0 * PI * 1f64.sinh())).ln() + 1.0;
        assert_abs_diff_eq!(
            d.log_density(&[0.0, 0.0, 1.0]).unwrap().value,
            expected,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(expected, -1.6924636085404865, epsilon = 1e-12);

        assert!(matches!(
            d.log_density(&[0.0, 0.0, 2.0]),
            Err(Error::NotUnitVector { .. })
        ));
    }

    #[test]
    fn normalizer_is_stable() {
        for &k in &[1e-9, 1e-3, 1.0, 50.0, 700.0, 5000.0] {
            let direct = if k < 300.0 {
                Some((k / (4.0 * PI * f64::sinh(k))).ln())
            } else {
                None
            };
            let v = VmfDistribution::log_normalizer_p3(k);
            assert!(v.is_finite());
            if let Some(d) = direct {
                assert_abs_diff_eq!(v, d, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn density_ratio_antipodal() {
        for &p in &[2usize, 3, 7] {
            let mut mu = vec![0.0; p];
            mu[0] = 1.0;
            let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
            let d = VmfDistribution::new(DenseVector::new(mu.clone()).unwrap(), 2.5).unwrap();
            let a = d.log_density(&mu).unwrap();
            let b = d.log_density(&neg).unwrap();
            assert_eq!(a.normalized, p == 3);
            assert_abs_diff_eq!(a.value - b.value, 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn samples_are_unit_and_deterministic() {
        let d = VmfDistribution::new(unit(&[1.0, 2.0, -1.0, 0.5]), 7.0).unwrap();
        let a = d.sample_seeded(500, 42);
        let b = d.sample_seeded(500, 42);
        assert_eq!(a, b);
        for row in a.iter_rows() {
            assert_abs_diff_eq!(math::norm(row), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn map_loss_examples() {
        let mus = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let x = DenseMatrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(
            vmf_map_loss(&x, &mus, 0.0, &[0, 2]).unwrap(),
            3f64.ln(),
            epsilon = 1e-15
        );

        let one = DenseMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(
            vmf_map_loss(&x, &one, 5.0, &[0, 0]).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        let bad = DenseMatrix::from_rows(&[[2.0, 0.0]]).unwrap();
        assert!(matches!(
            vmf_map_loss(&bad, &mus, 1.0, &[0]),
            Err(Error::NotUnitVector { .. })
        ));
        assert!(matches!(
            vmf_map_loss(&x, &mus, 1.0, &[0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_dataset_properties() {
        let ds = make_synthetic_dataset(4, 5, 20.0, 30, 7).unwrap();
        assert_eq!(ds.samples.len(), 120);
        for row in ds.samples.inputs.iter_rows() {
            assert_abs_diff_eq!(math::norm(row), 1.0, epsilon = 1e-10);
        }
        for i in 0..4 {
            for j in 0..i {
                assert_abs_diff_eq!(
                    math::dot(ds.class_means.row(i), ds.class_means.row(j)),
                    0.0,
                    epsilon = 1e-12
                );
            }
        }
        assert!(ds.detection_scores.iter().all(|&p| p > 0.0 && p < 1.0));
        // Higher cosine to the class mean gives a higher score.
        let cos: Vec<f64> = (0..ds.samples.len())
            .map(|i| {
                math::dot(
                    ds.samples.inputs.row(i),
                    ds.class_means.row(ds.samples.labels[i]),
                )
            })
            .collect();
        for i in 0..cos.len() {
            for j in 0..cos.len() {
                if cos[i] > cos[j] {
                    assert!(ds.detection_scores[i] >= ds.detection_scores[j]);
                }
            }
        }
        assert_eq!(ds, make_synthetic_dataset(4, 5, 20.0, 30, 7).unwrap());
        let (train, test) = ds.split(20);
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 40);
        assert!(make_synthetic_dataset(1, 5, 1.0, 3, 0).is_err());
    }

    #[test]
    fn quality_templates_shape() {
        let cfg = QualityTemplateConfig {
            subjects: 5,
            ..QualityTemplateConfig::default()
        };
        let t = make_quality_templates(&cfg).unwrap();
        assert_eq!(t.len(), 15);
        assert!(t.iter().all(|t| t.items().len() == cfg.items_per_template));
        assert_eq!(t, make_quality_templates(&cfg).unwrap());
    }
}
