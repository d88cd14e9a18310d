//! Flattening a template (a set of media items of one subject) into a single
//! feature vector, and rescaling pair scores by detection quality.
//!
//! Quality pooling weights each item by a softmax over its clamped detection
//! half-log-odds; quality attenuation divides a pair score by `gamma` when
//! either template's best detection score is at or below a threshold.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::DenseVector;

/// Ingested detection scores are clamped into `[SCORE_CLAMP, 1 − SCORE_CLAMP]`.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Upper bound on the detection logit.
pub const MAX_DETECTION_LOGIT: f64 = 7.0;

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_GAMMA: f64 = 1.1;
pub const DEFAULT_DET_THRESHOLD: f64 = 0.75;

/// Clamps a detection score into the open unit interval. Returns the clamped
/// value and whether clamping changed it; values outside `[0, 1]` are errors.
pub fn clamp_detection_score(p: f64) -> Result<(f64, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    let c = p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    Ok((c, c != p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediaItem {
    media_id: String,
    feature: DenseVector,
    detection_score: f64,
}

impl MediaItem {
    /// The detection score is clamped on construction.
    pub fn new(
        media_id: impl Into<String>,
        feature: DenseVector,
        detection_score: f64,
    ) -> Result<Self> {
        let (detection_score, _) = clamp_detection_score(detection_score)?;
        Ok(MediaItem {
            media_id: media_id.into(),
            feature,
            detection_score,
        })
    }

    pub fn media_id(&self) -> &str {
        &self.media_id
    }

    pub fn feature(&self) -> &DenseVector {
        &self.feature
    }

    pub fn detection_score(&self) -> f64 {
        self.detection_score
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    template_id: String,
    subject_id: String,
    items: Vec<MediaItem>,
}

impl Template {
    pub fn new(
        template_id: impl Into<String>,
        subject_id: impl Into<String>,
        items: Vec<MediaItem>,
    ) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyTemplate)?;
        let dim = first.feature.dim();
        if let Some(bad) = items.iter().find(|i| i.feature.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.feature.dim(),
            });
        }
        Ok(Template {
            template_id: template_id.into(),
            subject_id: subject_id.into(),
            items,
        })
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn items(&self) -> &[MediaItem] {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.items[0].feature.dim()
    }

    /// Item indices in a canonical order independent of input order, so
    /// pooled sums are bit-stable under permutation.
    fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.sort_by(|&a, &b| compare_items(&self.items[a], &self.items[b]));
        idx
    }
}

fn compare_items(a: &MediaItem, b: &MediaItem) -> Ordering {
    a.media_id
        .cmp(&b.media_id)
        .then(a.detection_score.total_cmp(&b.detection_score))
        .then_with(|| {
            a.feature
                .iter()
                .zip(b.feature.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// `min(½ ln(p / (1 − p)), 7)`. Only the upper side is clamped.
pub fn detection_logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok((0.5 * (p / (1.0 - p)).ln()).min(MAX_DETECTION_LOGIT))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "lambda must be a finite non-negative number, got {lambda}"
        )));
    }
    Ok(())
}

/// Unnormalized, max-shifted weights `e^{λ l_i − max}` in item order.
fn quality_weights(template: &Template, lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let scaled: Vec<f64> = template
        .items
        .iter()
        .map(|i| detection_logit(i.detection_score).map(|l| lambda * l))
        .collect::<Result<_>>()?;
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(scaled.iter().map(|s| (s - max).exp()).collect())
}

/// Pooling coefficients `c_i = e^{λ l_i} / Σ_j e^{λ l_j}`, in item order.
pub fn quality_coefficients(template: &Template, lambda: f64) -> Result<Vec<f64>> {
    let w = quality_weights(template, lambda)?;
    let total: f64 = template.canonical_order().iter().map(|&i| w[i]).sum();
    Ok(w.iter().map(|x| x / total).collect())
}

/// Quality-weighted template feature `Σ c_i f_i`.
pub fn quality_pool(template: &Template, lambda: f64) -> Result<DenseVector> {
    let w = quality_weights(template, lambda)?;
    let mut acc = vec![0.0; template.dim()];
    let mut total = 0.0;
    for i in template.canonical_order() {
        total += w[i];
        for (a, &f) in acc.iter_mut().zip(template.items[i].feature.iter()) {
            *a += w[i] * f;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(DenseVector::from_raw(acc))
}

/// Two-stage mean: items are averaged within each media id, then the media
/// means are averaged.
pub fn media_average_pool(template: &Template) -> Result<DenseVector> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in template.canonical_order() {
        groups
            .entry(template.items[i].media_id.as_str())
            .or_default()
            .push(i);
    }
    let dim = template.dim();
    let mut acc = vec![0.0; dim];
    for members in groups.values() {
        let mut group = vec![0.0; dim];
        for &i in members {
            for (g, &f) in group.iter_mut().zip(template.items[i].feature.iter()) {
                *g += f;
            }
        }
        let n = members.len() as f64;
        for (a, g) in acc.iter_mut().zip(&group) {
            *a += g / n;
        }
    }
    let n = groups.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(DenseVector::from_raw(acc))
}

/// Plain mean over all items, ignoring media grouping.
pub fn flat_mean_pool(template: &Template) -> DenseVector {
    let mut acc = vec![0.0; template.dim()];
    for i in template.canonical_order() {
        for (a, &f) in acc.iter_mut().zip(template.items[i].feature.iter()) {
            *a += f;
        }
    }
    let n = template.items.len() as f64;
    DenseVector::from_raw(acc.into_iter().map(|a| a / n).collect())
}

/// Maximum detection score in the template.
pub fn template_lomax(template: &Template) -> f64 {
    template
        .items
        .iter()
        .map(|i| i.detection_score)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Divides `score` by `gamma` when either template's maximum detection score
/// is at or below `det_threshold`.
pub fn quality_attenuate(
    score: f64,
    lomax1: f64,
    lomax2: f64,
    gamma: f64,
    det_threshold: f64,
) -> f64 {
    if lomax1 <= det_threshold || lomax2 <= det_threshold {
        score / gamma
    } else {
        score
    }
}
