//! Quality measures Ψ.
//!
//! Every measure maps an explanation of one prediction to a scalar where
//! higher means better. Faithfulness measures perturb the input through a
//! [`BaselineKind`]; localization measures compare against a
//! [`GroundTruthMask`]. The faithfulness and localization formulas follow the
//! basic (unweighted) variants popularized by the Quantus toolkit.
//!
//! With a [`FeatureGrouping`] in the context, perturbation-based measures
//! operate on whole groups, and a raw per-feature explanation is first summed
//! per group.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionVector, FeatureGrouping, GroundTruthMask, QualityScore};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::seed;
use crate::stats;

/// Replacement value for removed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "mean", rename_all = "snake_case")]
pub enum BaselineKind {
    Zeros,
    FeatureMean(Vec<f64>),
}

impl BaselineKind {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            BaselineKind::Zeros => Ok(()),
            BaselineKind::FeatureMean(m) if m.len() != dim => {
                Err(Error::shape(dim, m.len(), "feature_mean baseline"))
            }
            BaselineKind::FeatureMean(_) => Ok(()),
        }
    }

    /// The fully-removed input of dimension `dim`.
    pub fn vector(&self, dim: usize) -> Vec<f64> {
        match self {
            BaselineKind::Zeros => vec![0.0; dim],
            BaselineKind::FeatureMean(m) => m.clone(),
        }
    }

    #[inline]
    fn value(&self, feature: usize) -> f64 {
        match self {
            BaselineKind::Zeros => 0.0,
            BaselineKind::FeatureMean(m) => m[feature],
        }
    }
}

/// Everything a measure needs besides the explanation itself.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub model: &'a dyn Classifier,
    pub input: &'a [f64],
    /// The explained class (normally the predicted one).
    pub class: usize,
    pub baseline: &'a BaselineKind,
    pub grouping: Option<&'a FeatureGrouping>,
    pub mask: Option<&'a GroundTruthMask>,
    /// Seed for measures with internal randomness.
    pub seed: u64,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        model: &'a dyn Classifier,
        input: &'a [f64],
        class: usize,
        baseline: &'a BaselineKind,
    ) -> Self {
        Self {
            model,
            input,
            class,
            baseline,
            grouping: None,
            mask: None,
            seed: 0,
        }
    }

    pub fn with_grouping(mut self, grouping: Option<&'a FeatureGrouping>) -> Self {
        self.grouping = grouping;
        self
    }

    pub fn with_mask(mut self, mask: Option<&'a GroundTruthMask>) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of perturbation units: groups if grouped, else features.
    pub fn unit_count(&self) -> usize {
        self.grouping
            .map_or(self.input.len(), FeatureGrouping::group_count)
    }

    fn check(&self) -> Result<()> {
        let d = self.model.input_dim();
        if self.input.len() != d {
            return Err(Error::shape(d, self.input.len(), "metric input"));
        }
        if self.class >= self.model.class_count() {
            return Err(Error::ClassOutOfRange {
                class: self.class,
                classes: self.model.class_count(),
            });
        }
        if let Some(g) = self.grouping {
            if g.feature_count() != d {
                return Err(Error::shape(d, g.feature_count(), "feature grouping"));
            }
        }
        self.baseline.validate(d)
    }

    /// One attribution per perturbation unit.
    fn unit_attributions(&self, e: &AttributionVector) -> Result<Vec<f64>> {
        match self.grouping {
            Some(g) if e.len() == g.group_count() => Ok(e.values().to_vec()),
            Some(g) if e.len() == g.feature_count() => Ok(g.aggregate(e.values())?.into_values()),
            Some(g) => Err(Error::shape(g.group_count(), e.len(), "grouped explanation")),
            None if e.len() == self.input.len() => Ok(e.values().to_vec()),
            None => Err(Error::shape(self.input.len(), e.len(), "explanation")),
        }
    }

    fn unit_members(&self) -> Vec<Vec<usize>> {
        match self.grouping {
            Some(g) => g.members(),
            None => (0..self.input.len()).map(|i| vec![i]).collect(),
        }
    }

    fn mask(&self) -> Result<&'a GroundTruthMask> {
        let mask = self
            .mask
            .ok_or_else(|| Error::InvalidMetricParam("localization metric needs a ground-truth mask".into()))?;
        if mask.len() != self.input.len() {
            return Err(Error::shape(self.input.len(), mask.len(), "ground-truth mask"));
        }
        Ok(mask)
    }

    /// Raw per-feature explanation; group-level explanations are broadcast to
    /// their members.
    fn raw_attributions(&self, e: &AttributionVector) -> Result<Vec<f64>> {
        let d = self.input.len();
        match self.grouping {
            _ if e.len() == d => Ok(e.values().to_vec()),
            Some(g) if e.len() == g.group_count() => {
                Ok(g.group_of().iter().map(|&k| e.values()[k]).collect())
            }
            _ => Err(Error::shape(d, e.len(), "explanation")),
        }
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.model.class_probability(x, self.class)
    }
}

/// A quality measure Ψ.
pub trait QualityMeasure: Send + Sync {
    fn name(&self) -> &str;

    /// Orientation of the score. Transforms assume higher is better.
    fn higher_is_better(&self) -> bool {
        true
    }

    fn evaluate(&self, ctx: &EvalContext<'_>, e: &AttributionVector) -> Result<QualityScore>;
}

pub const DEFAULT_CORRELATION_RUNS: usize = 100;

fn default_runs() -> usize {
    DEFAULT_CORRELATION_RUNS
}

/// The available measures and their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricKind {
    PixelFlipping,
    FaithfulnessCorrelation {
        #[serde(default = "default_runs")]
        runs: usize,
        /// Defaults to `max(1, ⌈0.1·D⌉)`.
        #[serde(default)]
        subset_size: Option<usize>,
    },
    FaithfulnessEstimate,
    MonotonicityCorrelation,
    AttributionLocalisation,
    TopKIntersection {
        /// Defaults to the mask size.
        #[serde(default)]
        k: Option<usize>,
    },
    RelevanceRankAccuracy,
    RelevanceMassAccuracy,
    Auc,
}

impl MetricKind {
    pub fn id(&self) -> &'static str {
        match self {
            MetricKind::PixelFlipping => "pixel_flipping",
            MetricKind::FaithfulnessCorrelation { .. } => "faithfulness_correlation",
            MetricKind::FaithfulnessEstimate => "faithfulness_estimate",
            MetricKind::MonotonicityCorrelation => "monotonicity_correlation",
            MetricKind::AttributionLocalisation => "attribution_localisation",
            MetricKind::TopKIntersection { .. } => "top_k_intersection",
            MetricKind::RelevanceRankAccuracy => "relevance_rank_accuracy",
            MetricKind::RelevanceMassAccuracy => "relevance_mass_accuracy",
            MetricKind::Auc => "auc",
        }
    }

    pub fn needs_mask(&self) -> bool {
        matches!(
            self,
            MetricKind::AttributionLocalisation
                | MetricKind::TopKIntersection { .. }
                | MetricKind::RelevanceRankAccuracy
                | MetricKind::RelevanceMassAccuracy
                | MetricKind::Auc
        )
    }

    /// Whether the score depends on the explanation only through its ranking.
    pub fn rank_only(&self) -> bool {
        matches!(
            self,
            MetricKind::PixelFlipping
                | MetricKind::TopKIntersection { .. }
                | MetricKind::RelevanceRankAccuracy
        )
    }

    /// Short hash of the metric id and parameters.
    pub fn params_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("metric kinds serialize");
        crate::seed::content_hash(json.as_bytes())
    }
}

impl QualityMeasure for MetricKind {
    fn name(&self) -> &str {
        self.id()
    }

    fn evaluate(&self, ctx: &EvalContext<'_>, e: &AttributionVector) -> Result<QualityScore> {
        match *self {
            MetricKind::PixelFlipping => pixel_flipping(ctx, e),
            MetricKind::FaithfulnessCorrelation { runs, subset_size } => {
                faithfulness_correlation(ctx, e, runs, subset_size)
            }
            MetricKind::FaithfulnessEstimate => faithfulness_estimate(ctx, e),
            MetricKind::MonotonicityCorrelation => monotonicity_correlation(ctx, e),
            MetricKind::AttributionLocalisation => {
                attribution_localisation(&ctx.raw_attributions(e)?, ctx.mask()?)
            }
            MetricKind::RelevanceMassAccuracy => {
                relevance_mass_accuracy(&ctx.raw_attributions(e)?, ctx.mask()?)
            }
            MetricKind::TopKIntersection { k } => {
                let mask = ctx.mask()?;
                top_k_intersection(&ctx.raw_attributions(e)?, mask, k.unwrap_or(mask.count()))
            }
            MetricKind::RelevanceRankAccuracy => {
                relevance_rank_accuracy(&ctx.raw_attributions(e)?, ctx.mask()?)
            }
            MetricKind::Auc => auc(&ctx.raw_attributions(e)?, ctx.mask()?),
        }
    }
}

/// Wraps a measure and counts its evaluations.
pub struct CountingMeasure<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M: QualityMeasure> CountingMeasure<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<M: QualityMeasure> QualityMeasure for CountingMeasure<M> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn higher_is_better(&self) -> bool {
        self.inner.higher_is_better()
    }

    fn evaluate(&self, ctx: &EvalContext<'_>, e: &AttributionVector) -> Result<QualityScore> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(ctx, e)
    }
}

/// Units in descending attribution order, ties by descending index (the
/// reverse of the stable ascending order).
fn descending_units(units: &[f64]) -> Vec<usize> {
    AttributionVector::new(units.to_vec())
        .map(|v| v.ranking_descending().into())
        .unwrap_or_else(|_| (0..units.len()).rev().collect())
}

/// Keeps the `m` most attributed units of `x` and replaces the rest by the
/// baseline.
pub fn mask_features(ctx: &EvalContext<'_>, e: &AttributionVector, m: usize) -> Result<Vec<f64>> {
    ctx.check()?;
    let units = ctx.unit_attributions(e)?;
    if m > units.len() {
        return Err(Error::InvalidM {
            m,
            max: units.len(),
        });
    }
    let members = ctx.unit_members();
    let mut out = ctx.baseline.vector(ctx.input.len());
    for &u in &descending_units(&units)[..m] {
        for &f in &members[u] {
            out[f] = ctx.input[f];
        }
    }
    Ok(out)
}

/// Mean class score over all selection levels: `(1/D)·Σ_{m=0}^{D} f_y(x_m)`
/// where `x_m` keeps the top-`m` units. The `D+1` terms over divisor `D` are
/// deliberate; the constant factor does not affect any ranking.
pub fn pixel_flipping(ctx: &EvalContext<'_>, e: &AttributionVector) -> Result<QualityScore> {
    ctx.check()?;
    let units = ctx.unit_attributions(e)?;
    let members = ctx.unit_members();
    let mut current = ctx.baseline.vector(ctx.input.len());
    let mut total = ctx.score(&current)?;
    for u in descending_units(&units) {
        for &f in &members[u] {
            current[f] = ctx.input[f];
        }
        total += ctx.score(&current)?;
    }
    Ok(QualityScore::new(total / units.len() as f64))
}

fn correlation_score(r: Result<f64>) -> Result<QualityScore> {
    match r {
        Ok(v) => Ok(QualityScore::new(v)),
        Err(Error::DegenerateCorrelation) => Ok(QualityScore::degenerate()),
        Err(e) => Err(e),
    }
}

/// Output drop `f_y(x) − f_y(x with each unit baselined)`, one per unit.
fn single_unit_drops(ctx: &EvalContext<'_>) -> Result<Vec<f64>> {
    let full = ctx.score(ctx.input)?;
    let mut x = ctx.input.to_vec();
    ctx.unit_members()
        .iter()
        .map(|members| {
            for &f in members {
                x[f] = ctx.baseline.value(f);
            }
            let drop = full - ctx.score(&x)?;
            for &f in members {
                x[f] = ctx.input[f];
            }
            Ok(drop)
        })
        .collect()
}

/// Default subset size for faithfulness correlation.
pub fn default_subset_size(units: usize) -> usize {
    (units as f64 * 0.1).ceil().max(1.0) as usize
}

/// Pearson correlation, over `runs` random unit subsets, between the summed
/// attribution of the subset and the output drop from baselining it.
///
/// Subsets are drawn from `ctx.seed`, so two explanations evaluated in the
/// same context see the same subsets.
pub fn faithfulness_correlation(
    ctx: &EvalContext<'_>,
    e: &AttributionVector,
    runs: usize,
    subset_size: Option<usize>,
) -> Result<QualityScore> {
    ctx.check()?;
    let units = ctx.unit_attributions(e)?;
    let n = units.len();
    let size = subset_size.unwrap_or_else(|| default_subset_size(n));
    if size == 0 || size > n {
        return Err(Error::InvalidMetricParam(format!(
            "subset_size {size} outside 1..={n}"
        )));
    }
    if runs < 2 {
        return Err(Error::InvalidMetricParam(format!("runs must be at least 2, got {runs}")));
    }
    let members = ctx.unit_members();
    let full = ctx.score(ctx.input)?;
    let mut rng = seed::rng(ctx.seed);
    let mut sums = Vec::with_capacity(runs);
    let mut drops = Vec::with_capacity(runs);
    for _ in 0..runs {
        let subset = index::sample(&mut rng, n, size);
        let mut x = ctx.input.to_vec();
        let mut sum = 0.0;
        for u in subset.iter() {
            sum += units[u];
            for &f in &members[u] {
                x[f] = ctx.baseline.value(f);
            }
        }
        sums.push(sum);
        drops.push(full - ctx.score(&x)?);
    }
    correlation_score(stats::pearson_r(&sums, &drops))
}

/// Pearson correlation across units between attribution and the output drop
/// from baselining that unit alone.
pub fn faithfulness_estimate(ctx: &EvalContext<'_>, e: &AttributionVector) -> Result<QualityScore> {
    ctx.check()?;
    let units = ctx.unit_attributions(e)?;
    if units.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: units.len() });
    }
    correlation_score(stats::pearson_r(&units, &single_unit_drops(ctx)?))
}

/// Spearman correlation across units between `|e_i|` and the squared output
/// drop from baselining unit `i`.
pub fn monotonicity_correlation(ctx: &EvalContext<'_>, e: &AttributionVector) -> Result<QualityScore> {
    ctx.check()?;
    let units = ctx.unit_attributions(e)?;
    if units.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: units.len() });
    }
    let magnitudes: Vec<f64> = units.iter().map(|v| v.abs()).collect();
    let squared: Vec<f64> = single_unit_drops(ctx)?.iter().map(|d| d * d).collect();
    correlation_score(stats::spearman_rho(&magnitudes, &squared))
}

fn check_mask(e: &[f64], mask: &GroundTruthMask) -> Result<()> {
    if e.len() != mask.len() {
        return Err(Error::shape(mask.len(), e.len(), "explanation vs mask"));
    }
    if let Some(i) = e.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSeries(i));
    }
    Ok(())
}

/// Share of positive attribution that falls inside the mask. Negative
/// attributions are clamped to 0.
pub fn attribution_localisation(e: &[f64], mask: &GroundTruthMask) -> Result<QualityScore> {
    check_mask(e, mask)?;
    let (mut inside, mut total) = (0.0, 0.0);
    for (i, &v) in e.iter().enumerate() {
        let p = v.max(0.0);
        total += p;
        if mask.contains(i) {
            inside += p;
        }
    }
    if total == 0.0 {
        return Err(Error::AllNonPositive);
    }
    Ok(QualityScore::new(inside / total))
}

/// Identical to [`attribution_localisation`] in the unweighted variant; kept as
/// a separate metric id.
pub fn relevance_mass_accuracy(e: &[f64], mask: &GroundTruthMask) -> Result<QualityScore> {
    attribution_localisation(e, mask)
}

fn top_k_hits(e: &[f64], mask: &GroundTruthMask, k: usize) -> usize {
    descending_units(e)[..k]
        .iter()
        .filter(|&&i| mask.contains(i))
        .count()
}

/// Fraction of the `k` most attributed features that lie inside the mask.
pub fn top_k_intersection(e: &[f64], mask: &GroundTruthMask, k: usize) -> Result<QualityScore> {
    check_mask(e, mask)?;
    if k == 0 || k > e.len() {
        return Err(Error::InvalidK { k, max: e.len() });
    }
    Ok(QualityScore::new(top_k_hits(e, mask, k) as f64 / k as f64))
}

/// Fraction of the mask covered by the `|mask|` most attributed features.
pub fn relevance_rank_accuracy(e: &[f64], mask: &GroundTruthMask) -> Result<QualityScore> {
    check_mask(e, mask)?;
    let k = mask.count();
    Ok(QualityScore::new(top_k_hits(e, mask, k) as f64 / k as f64))
}

/// ROC-AUC of `e` as a score for mask membership (Mann-Whitney with average
/// ranks for ties).
pub fn auc(e: &[f64], mask: &GroundTruthMask) -> Result<QualityScore> {
    check_mask(e, mask)?;
    let pos = mask.count();
    let neg = e.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateMask);
    }
    let ranks = stats::average_ranks(e);
    let rank_sum: f64 = ranks
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.contains(*i))
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(QualityScore::new(u / (pos * neg) as f64))
}

/// One metric evaluation, as streamed to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub input_id: usize,
    pub explanation_id: usize,
    pub metric: String,
    pub params_hash: String,
    pub score: f64,
}

pub fn write_metric_csv<W: std::io::Write>(out: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metric csv>", e))?;
    Ok(())
}
