//! Template pair scoring and the verification / identification metric suite.
//!
//! Conventions:
//! - ROC thresholds sit at every distinct score; a pair is accepted when its
//!   score is `>=` the threshold.
//! - `TAR@FAR` is step-wise: the best TAR among operating points whose FAR
//!   does not exceed the target, or 0 when none does. No interpolation.
//! - Identification ranks gallery templates by descending score; ties keep
//!   gallery input order.

use std::collections::{BTreeMap, HashMap};

use crate::aggregation::{self, Template};
use crate::error::{Error, Result};
use crate::math::{self, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Match,
    Nonmatch,
    /// Scored but excluded from ROC computation.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub template1: String,
    pub template2: String,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairProtocol {
    pub pairs: Vec<Pair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentProtocol {
    pub gallery: Vec<String>,
    pub probes: Vec<String>,
    pub open_set: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pooling {
    MediaAverage,
    Quality(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attenuation {
    pub gamma: f64,
    pub det_threshold: f64,
}

impl Attenuation {
    pub fn new(gamma: f64, det_threshold: f64) -> Result<Self> {
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be >= 1, got {gamma}"
            )));
        }
        if !det_threshold.is_finite() {
            return Err(Error::InvalidConfig("det_threshold must be finite".into()));
        }
        Ok(Attenuation {
            gamma,
            det_threshold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    pub pooling: Pooling,
    pub attenuation: Option<Attenuation>,
    /// Map cosine to `(1 + cos) / 2` before attenuation so that division by
    /// gamma always lowers the score.
    pub shift_scores: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            pooling: Pooling::Quality(aggregation::DEFAULT_LAMBDA),
            attenuation: None,
            shift_scores: false,
        }
    }
}

/// Templates addressable by id, kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: Vec<Template>,
    index: HashMap<String, usize>,
}

impl TemplateSet {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        let mut index = HashMap::with_capacity(templates.len());
        for (i, t) in templates.iter().enumerate() {
            if index.insert(t.template_id().to_string(), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate template id `{}`",
                    t.template_id()
                )));
            }
        }
        Ok(TemplateSet { templates, index })
    }

    pub fn get(&self, id: &str) -> Result<&Template> {
        self.index
            .get(id)
            .map(|&i| &self.templates[i])
            .ok_or_else(|| Error::MissingTemplate(id.to_string()))
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

pub fn pool(template: &Template, pooling: Pooling) -> Result<DenseVector> {
    match pooling {
        Pooling::MediaAverage => aggregation::media_average_pool(template),
        Pooling::Quality(lambda) => aggregation::quality_pool(template, lambda),
    }
}

/// Pools each template once and remembers its maximum detection score.
struct PooledCache<'a> {
    set: &'a TemplateSet,
    pooling: Pooling,
    entries: HashMap<String, (DenseVector, f64)>,
}

impl<'a> PooledCache<'a> {
    fn new(set: &'a TemplateSet, pooling: Pooling) -> Self {
        PooledCache {
            set,
            pooling,
            entries: HashMap::new(),
        }
    }

    fn get(&mut self, id: &str) -> Result<&(DenseVector, f64)> {
        if !self.entries.contains_key(id) {
            let t = self.set.get(id)?;
            let feature = pool(t, self.pooling)?;
            self.entries
                .insert(id.to_string(), (feature, aggregation::template_lomax(t)));
        }
        Ok(&self.entries[id])
    }

    fn score(&mut self, a: &str, b: &str, options: &ScoringOptions) -> Result<f64> {
        let (fa, la) = self.get(a)?.clone();
        let (fb, lb) = self.get(b)?;
        let mut s = math::cosine_similarity(&fa, fb)?;
        if options.shift_scores {
            s = 0.5 * (1.0 + s);
        }
        if let Some(att) = options.attenuation {
            s = aggregation::quality_attenuate(s, la, *lb, att.gamma, att.det_threshold);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub pair: Pair,
    pub score: f64,
}

/// Cosine similarity of pooled template features for every protocol pair,
/// attenuated when configured.
pub fn score_pairs(
    templates: &TemplateSet,
    protocol: &PairProtocol,
    options: &ScoringOptions,
) -> Result<Vec<ScoredPair>> {
    let mut cache = PooledCache::new(templates, options.pooling);
    protocol
        .pairs
        .iter()
        .map(|p| {
            Ok(ScoredPair {
                pair: p.clone(),
                score: cache.score(&p.template1, &p.template2, options)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// Operating points sorted by ascending threshold; FAR and TAR are
/// non-increasing along the list.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub num_match: usize,
    pub num_nonmatch: usize,
}

impl RocCurve {
    /// Area under the curve (trapezoidal), including the `(0, 0)` corner.
    pub fn auc(&self) -> f64 {
        let mut area = 0.0;
        let (mut prev_far, mut prev_tar) = (0.0, 0.0);
        for p in self.points.iter().rev() {
            area += (p.far - prev_far) * (p.tar + prev_tar) * 0.5;
            prev_far = p.far;
            prev_tar = p.tar;
        }
        area
    }

    /// Smallest non-zero FAR this curve can resolve.
    pub fn min_far_step(&self) -> f64 {
        1.0 / self.num_nonmatch as f64
    }
}

/// ROC over labelled scores; `Unknown` labels are ignored.
pub fn roc(scores: &[(f64, PairLabel)]) -> Result<RocCurve> {
    let mut labelled: Vec<(f64, bool)> = scores
        .iter()
        .filter_map(|&(s, l)| match l {
            PairLabel::Match => Some((s, true)),
            PairLabel::Nonmatch => Some((s, false)),
            PairLabel::Unknown => None,
        })
        .collect();
    if labelled.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite("pair scores"));
    }
    let num_match = labelled.iter().filter(|(_, m)| *m).count();
    let num_nonmatch = labelled.len() - num_match;
    if num_match == 0 || num_nonmatch == 0 {
        return Err(Error::DegenerateLabels);
    }
    // Descending sweep accumulates counts of scores >= threshold.
    labelled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < labelled.len() {
        let t = labelled[i].0;
        while i < labelled.len() && labelled[i].0 == t {
            if labelled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: fp as f64 / num_nonmatch as f64,
            tar: tp as f64 / num_match as f64,
        });
    }
    points.reverse();
    Ok(RocCurve {
        points,
        num_match,
        num_nonmatch,
    })
}

/// Best TAR at any operating point with `FAR <= far_target`; 0 if none.
pub fn tar_at_far(curve: &RocCurve, far_target: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.far <= far_target)
        .map(|p| p.tar)
        .fold(0.0, f64::max)
}

/// Scores of every gallery template against one probe, best first. Ties keep
/// gallery order.
fn rank_gallery(
    cache: &mut PooledCache<'_>,
    probe: &str,
    gallery: &[String],
    options: &ScoringOptions,
) -> Result<Vec<(usize, f64)>> {
    let mut scored = gallery
        .iter()
        .enumerate()
        .map(|(gi, g)| Ok((gi, cache.score(probe, g, options)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

fn check_ident(templates: &TemplateSet, protocol: &IdentProtocol) -> Result<()> {
    if protocol.gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if protocol.probes.is_empty() {
        return Err(Error::Empty("probe list"));
    }
    for id in protocol.gallery.iter().chain(&protocol.probes) {
        templates.get(id)?;
    }
    Ok(())
}

/// Closed-set retrieval: the cumulative match characteristic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedSetResult {
    /// `cmc[k-1]` is the fraction of probes whose mate is within the top `k`.
    pub cmc: Vec<f64>,
}

impl ClosedSetResult {
    /// Rank-`k` retrieval rate; ranks beyond the gallery size saturate.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks start at 1");
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    /// Rates at ranks 1, 5 and 10.
    pub fn standard_ranks(&self) -> Vec<(usize, f64)> {
        [1, 5, 10].iter().map(|&k| (k, self.rank(k))).collect()
    }
}

pub fn closed_set_identify(
    templates: &TemplateSet,
    protocol: &IdentProtocol,
    options: &ScoringOptions,
) -> Result<ClosedSetResult> {
    check_ident(templates, protocol)?;
    let subjects: Vec<&str> = protocol
        .gallery
        .iter()
        .map(|g| templates.get(g).map(|t| t.subject_id()))
        .collect::<Result<_>>()?;
    let mut cache = PooledCache::new(templates, options.pooling);
    let mut hits = vec![0usize; protocol.gallery.len()];
    for probe in &protocol.probes {
        let subject = templates.get(probe)?.subject_id().to_string();
        if !subjects.contains(&subject.as_str()) {
            return Err(Error::ProbeWithoutMate(probe.clone()));
        }
        let ranked = rank_gallery(&mut cache, probe, &protocol.gallery, options)?;
        let pos = ranked
            .iter()
            .position(|&(gi, _)| subjects[gi] == subject)
            .expect("mate present");
        hits[pos] += 1;
    }
    let n = protocol.probes.len() as f64;
    let mut cum = 0usize;
    let cmc = hits
        .iter()
        .map(|h| {
            cum += h;
            cum as f64 / n
        })
        .collect();
    Ok(ClosedSetResult { cmc })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenSetPoint {
    pub threshold: f64,
    pub fpir: f64,
    pub tpir: f64,
}

/// Top-1 outcomes of an open-set search.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetResult {
    /// For each mated probe: top-1 score and whether the top-1 is its mate.
    pub mated: Vec<(f64, bool)>,
    /// Top-1 score of each non-mated probe.
    pub nonmated: Vec<f64>,
}

impl OpenSetResult {
    /// FPIR and TPIR when accepting top-1 candidates scoring `>= threshold`.
    pub fn rates_at(&self, threshold: f64) -> OpenSetPoint {
        let fp = self.nonmated.iter().filter(|&&s| s >= threshold).count();
        let tp = self
            .mated
            .iter()
            .filter(|&&(s, hit)| hit && s >= threshold)
            .count();
        OpenSetPoint {
            threshold,
            fpir: fp as f64 / self.nonmated.len() as f64,
            tpir: tp as f64 / self.mated.len() as f64,
        }
    }

    /// One point per distinct top-1 score, ascending threshold.
    pub fn curve(&self) -> Vec<OpenSetPoint> {
        let mut thresholds: Vec<f64> = self
            .mated
            .iter()
            .map(|m| m.0)
            .chain(self.nonmated.iter().copied())
            .collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.into_iter().map(|t| self.rates_at(t)).collect()
    }

    /// Best TPIR with `FPIR <= fpir_target`; 0 if none.
    pub fn tpir_at_fpir(&self, fpir_target: f64) -> f64 {
        self.curve()
            .iter()
            .filter(|p| p.fpir <= fpir_target)
            .map(|p| p.tpir)
            .fold(0.0, f64::max)
    }
}

pub fn open_set_identify(
    templates: &TemplateSet,
    protocol: &IdentProtocol,
    options: &ScoringOptions,
) -> Result<OpenSetResult> {
    check_ident(templates, protocol)?;
    let subjects: Vec<&str> = protocol
        .gallery
        .iter()
        .map(|g| templates.get(g).map(|t| t.subject_id()))
        .collect::<Result<_>>()?;
    let mut cache = PooledCache::new(templates, options.pooling);
    let mut result = OpenSetResult {
        mated: Vec::new(),
        nonmated: Vec::new(),
    };
    for probe in &protocol.probes {
        let subject = templates.get(probe)?.subject_id().to_string();
        let ranked = rank_gallery(&mut cache, probe, &protocol.gallery, options)?;
        let (top, score) = ranked[0];
        if subjects.contains(&subject.as_str()) {
            result.mated.push((score, subjects[top] == subject));
        } else {
            result.nonmated.push(score);
        }
    }
    if result.nonmated.is_empty() {
        return Err(Error::NoNonMatedProbes);
    }
    if result.mated.is_empty() {
        return Err(Error::NoMatedProbes);
    }
    Ok(result)
}

/// ROC of the pairs whose templates fall in one (unordered) pair of norm bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPairGroup {
    /// 1-based bin labels, `low <= high`.
    pub bins: (usize, usize),
    pub num_match: usize,
    pub num_nonmatch: usize,
    /// `None` when the group lacks match or non-match pairs.
    pub curve: Option<RocCurve>,
}

impl BinPairGroup {
    pub fn label(&self) -> String {
        format!("{}-{}", self.bins.0, self.bins.1)
    }
}

/// Index of the bin containing `norm`: the number of edges `<= norm`.
pub fn norm_bin(norm: f64, bin_edges: &[f64]) -> usize {
    bin_edges.iter().filter(|&&e| e <= norm).count()
}

/// Groups pairs by the L2-norm bins of their templates' raw mean features and
/// computes one ROC per bin pair. Groups without both labels are returned
/// with `curve: None`.
pub fn norm_bin_analysis(
    templates: &TemplateSet,
    bin_edges: &[f64],
    protocol: &PairProtocol,
) -> Result<Vec<BinPairGroup>> {
    if bin_edges.windows(2).any(|w| !(w[0] < w[1])) || bin_edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidBinEdges);
    }
    let mut pooled: HashMap<&str, (DenseVector, usize)> = HashMap::new();
    for t in templates.templates() {
        let f = aggregation::flat_mean_pool(t);
        let bin = norm_bin(math::norm(&f), bin_edges) + 1;
        pooled.insert(t.template_id(), (f, bin));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<(f64, PairLabel)>> = BTreeMap::new();
    for p in &protocol.pairs {
        let (fa, ba) = pooled
            .get(p.template1.as_str())
            .ok_or_else(|| Error::MissingTemplate(p.template1.clone()))?;
        let (fb, bb) = pooled
            .get(p.template2.as_str())
            .ok_or_else(|| Error::MissingTemplate(p.template2.clone()))?;
        let s = math::cosine_similarity(fa, fb)?;
        groups
            .entry(((*ba).min(*bb), (*ba).max(*bb)))
            .or_default()
            .push((s, p.label));
    }
    Ok(groups
        .into_iter()
        .map(|(bins, scores)| {
            let num_match = scores.iter().filter(|s| s.1 == PairLabel::Match).count();
            let num_nonmatch = scores.iter().filter(|s| s.1 == PairLabel::Nonmatch).count();
            let curve = roc(&scores).ok();
            if curve.is_none() {
                log::warn!(
                    "norm bin pair {}-{} skipped: {num_match} match / {num_nonmatch} non-match pairs",
                    bins.0,
                    bins.1
                );
            }
            BinPairGroup {
                bins,
                num_match,
                num_nonmatch,
                curve,
            }
        })
        .collect())
}

pub const DEFAULT_FAR_TARGETS: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
pub const DEFAULT_FPIR_TARGETS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Everything an evaluation run reports.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub roc: Option<RocCurve>,
    pub tar_at_far: Vec<(f64, f64)>,
    pub open_set: Option<Vec<OpenSetPoint>>,
    pub tpir_at_fpir: Vec<(f64, f64)>,
    pub rank_rates: Vec<(usize, f64)>,
    pub pair_scores: Vec<ScoredPair>,
}

impl EvalReport {
    pub fn verification(
        templates: &TemplateSet,
        protocol: &PairProtocol,
        options: &ScoringOptions,
        far_targets: &[f64],
    ) -> Result<Self> {
        let pair_scores = score_pairs(templates, protocol, options)?;
        let labelled: Vec<(f64, PairLabel)> = pair_scores
            .iter()
            .map(|s| (s.score, s.pair.label))
            .collect();
        let curve = roc(&labelled)?;
        let tar = far_targets
            .iter()
            .map(|&f| (f, tar_at_far(&curve, f)))
            .collect();
        Ok(EvalReport {
            roc: Some(curve),
            tar_at_far: tar,
            pair_scores,
            ..EvalReport::default()
        })
    }

    /// Closed-set ranks always; open-set curve as well when the protocol is
    /// flagged open-set.
    pub fn identification(
        templates: &TemplateSet,
        protocol: &IdentProtocol,
        options: &ScoringOptions,
        fpir_targets: &[f64],
    ) -> Result<Self> {
        let mut report = EvalReport::default();
        if protocol.open_set {
            let open = open_set_identify(templates, protocol, options)?;
            report.tpir_at_fpir = fpir_targets
                .iter()
                .map(|&f| (f, open.tpir_at_fpir(f)))
                .collect();
            report.open_set = Some(open.curve());
            let mated: Vec<String> = protocol
                .probes
                .iter()
                .filter(|p| {
                    let s = templates.get(p).map(|t| t.subject_id().to_string());
                    s.map(|s| {
                        protocol.gallery.iter().any(|g| {
                            templates
                                .get(g)
                                .map(|t| t.subject_id() == s)
                                .unwrap_or(false)
                        })
                    })
                    .unwrap_or(false)
                })
                .cloned()
                .collect();
            let closed = closed_set_identify(
                templates,
                &IdentProtocol {
                    gallery: protocol.gallery.clone(),
                    probes: mated,
                    open_set: false,
                },
                options,
            )?;
            report.rank_rates = closed.standard_ranks();
        } else {
            report.rank_rates = closed_set_identify(templates, protocol, options)?.standard_ranks();
        }
        Ok(report)
    }

    /// `key=value` summary lines, e.g. `tar@1e-3=0.912`.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(c) = &self.roc {
            out.push(format!("num_match={}", c.num_match));
            out.push(format!("num_nonmatch={}", c.num_nonmatch));
            out.push(format!("auc={}", c.auc()));
        }
        for (f, t) in &self.tar_at_far {
            out.push(format!("tar@{f:e}={t}"));
        }
        for (f, t) in &self.tpir_at_fpir {
            out.push(format!("tpir@fpir{f:e}={t}"));
        }
        for (k, r) in &self.rank_rates {
            out.push(format!("rank{k}={r}"));
        }
        out
    }
}
