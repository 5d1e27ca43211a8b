//! Exploration of the explanation space and comparison of transforms.
//!
//! For one input, [`explore`] scores every ranking of the features (or a
//! random sample of explanations) with a quality measure and records, per
//! explanation, `q`, QGE and QRAND_K for `K = 1..=k_max`. [`compare`] then
//! measures how well each transform preserves the ordering of `q`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionVector, Instance};
use crate::data::feature_mean;
use crate::error::{Error, Result};
use crate::explain::{chunk_ranges, enumerate_rankings, factorial, sample_explanations, MAX_EXHAUSTIVE_FEATURES};
use crate::metrics::{EvalContext, QualityMeasure};
use crate::model::{accuracy, train, EarlyStop, MaskAugment, MlpModel, TrainConfig, TrainReport};
use crate::seed;
use crate::stats::{self, kendall_tau, spearman_rho};
use crate::transform::orient;

/// Which explanations of an input to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExplorationMode {
    /// All `D!` rankings (`D ≤ 10`).
    Exhaustive,
    /// `samples` i.i.d. uniform random explanations.
    Sampled { samples: usize },
}

/// Scores of every explored explanation of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exploration {
    /// Number of perturbation units (features or groups).
    pub units: usize,
    pub q: Vec<f64>,
    pub qge: Vec<f64>,
    /// `qrand[k - 1][j]` is QRAND_k of explanation `j`.
    pub qrand: Vec<Vec<f64>>,
    /// Some evaluation was degenerate.
    pub degenerate: bool,
}

impl Exploration {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn k_max(&self) -> usize {
        self.qrand.len()
    }
}

const TAG_SAMPLES: u64 = 1;
const TAG_QRAND: u64 = 2;
const CHUNK: u64 = 2048;

struct Scored {
    q: f64,
    qge: f64,
    qrand: Vec<f64>,
    degenerate: bool,
}

fn score_one<M: QualityMeasure + ?Sized>(
    measure: &M,
    ctx: &EvalContext<'_>,
    e: &AttributionVector,
    k_max: usize,
    qrand_seed: u64,
) -> Result<Scored> {
    let base = measure.evaluate(ctx, e)?;
    let inv = measure.evaluate(ctx, &e.inverted())?;
    let q = orient(measure, base.value);
    let mut degenerate = base.degenerate || inv.degenerate;
    let mut sum = 0.0;
    let mut qrand = Vec::with_capacity(k_max);
    for (i, r) in sample_explanations(e.len(), k_max, qrand_seed).iter().enumerate() {
        let s = measure.evaluate(ctx, r)?;
        degenerate |= s.degenerate;
        sum += orient(measure, s.value);
        qrand.push(q - sum / (i + 1) as f64);
    }
    Ok(Scored {
        q,
        qge: q - orient(measure, inv.value),
        qrand,
        degenerate,
    })
}

/// Scores the explanation space of one input.
///
/// Explanation `j` draws its QRAND samples from `derive(seed, [.., j])`, so
/// results are independent of the thread count. Explanations live at the
/// unit level: with a grouping in `ctx` they rank groups.
pub fn explore<M: QualityMeasure + ?Sized>(
    measure: &M,
    ctx: &EvalContext<'_>,
    mode: ExplorationMode,
    k_max: usize,
    seed: u64,
) -> Result<Exploration> {
    if k_max == 0 {
        return Err(Error::InvalidTransform("k_max must be at least 1".into()));
    }
    let units = ctx.unit_count();
    let qrand_seed = |j: u64| seed::derive(seed, &[TAG_QRAND, j]);
    let scored: Vec<Scored> = match mode {
        ExplorationMode::Exhaustive => {
            if units > MAX_EXHAUSTIVE_FEATURES {
                return Err(Error::RefuseExhaustive { features: units });
            }
            let total = factorial(units);
            let chunks = chunk_ranges(total, total.div_ceil(CHUNK) as usize);
            let per_chunk = chunks
                .into_par_iter()
                .map(|range| {
                    let start = range.start;
                    enumerate_rankings(units, Some(range))?
                        .enumerate()
                        .map(|(off, r)| {
                            let j = start + off as u64;
                            score_one(measure, ctx, &r.to_attribution(), k_max, qrand_seed(j))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            per_chunk.into_iter().flatten().collect()
        }
        ExplorationMode::Sampled { samples } => {
            if samples == 0 {
                return Err(Error::EmptyDataset);
            }
            let explanations = sample_explanations(units, samples, seed::derive(seed, &[TAG_SAMPLES]));
            explanations
                .par_iter()
                .enumerate()
                .map(|(j, e)| score_one(measure, ctx, e, k_max, qrand_seed(j as u64)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut qrand = vec![Vec::with_capacity(scored.len()); k_max];
    for s in &scored {
        for (k, v) in s.qrand.iter().enumerate() {
            qrand[k].push(*v);
        }
    }
    Ok(Exploration {
        units,
        q: scored.iter().map(|s| s.q).collect(),
        qge: scored.iter().map(|s| s.qge).collect(),
        qrand,
        degenerate: scored.iter().any(|s| s.degenerate),
    })
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateCorrelation) => Ok(None),
        Err(e) => Err(e),
    }
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Kendall's tau of `q` with QGE and with QRAND_1 inside one quality stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumComparison {
    pub quantile: f64,
    pub size: usize,
    pub tau_qge: Option<f64>,
    pub tau_qrand1: Option<f64>,
    pub delta_tau: Option<f64>,
}

/// How well each transform preserves the ordering of `q` for one input.
/// `None` marks an undefined (all-tied) correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub explanations: usize,
    pub tau_qge: Option<f64>,
    pub rho_qge: Option<f64>,
    /// Indexed by `K - 1`.
    pub tau_qrand: Vec<Option<f64>>,
    pub rho_qrand: Vec<Option<f64>>,
    /// `τ(q, QGE) − τ(q, QRAND_1)`.
    pub delta_tau: Option<f64>,
    pub delta_rho: Option<f64>,
    pub strata: Vec<StratumComparison>,
}

pub fn compare(exploration: &Exploration, quantiles: &[f64]) -> Result<Comparison> {
    let q = &exploration.q;
    if q.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: q.len(),
        });
    }
    let tau_qge = optional(kendall_tau(q, &exploration.qge))?;
    let rho_qge = optional(spearman_rho(q, &exploration.qge))?;
    let tau_qrand = exploration
        .qrand
        .iter()
        .map(|s| optional(kendall_tau(q, s)))
        .collect::<Result<Vec<_>>>()?;
    let rho_qrand = exploration
        .qrand
        .iter()
        .map(|s| optional(spearman_rho(q, s)))
        .collect::<Result<Vec<_>>>()?;
    let qrand1 = &exploration.qrand[0];
    let strata_qge = stats::stratified_tau(q, &exploration.qge, quantiles)?;
    let strata_qrand = stats::stratified_tau(q, qrand1, quantiles)?;
    let strata = strata_qge
        .iter()
        .zip(&strata_qrand)
        .map(|(a, b)| StratumComparison {
            quantile: a.quantile,
            size: a.size,
            tau_qge: a.tau,
            tau_qrand1: b.tau,
            delta_tau: diff(a.tau, b.tau),
        })
        .collect();
    Ok(Comparison {
        explanations: q.len(),
        delta_tau: diff(tau_qge, tau_qrand[0]),
        delta_rho: diff(rho_qge, rho_qrand[0]),
        tau_qge,
        rho_qge,
        tau_qrand,
        rho_qrand,
        strata,
    })
}

fn mean_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| stats::mean(&v))
}

/// Means over inputs; undefined per-input values are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub inputs: usize,
    pub tau_qge: Option<f64>,
    pub rho_qge: Option<f64>,
    pub tau_qrand: Vec<Option<f64>>,
    pub rho_qrand: Vec<Option<f64>>,
    pub delta_tau: Option<f64>,
    pub delta_rho: Option<f64>,
    pub strata: Vec<StratumComparison>,
    /// Spearman correlation between K and mean τ(q, QRAND_K).
    pub k_curve_rho: Option<f64>,
    /// Smallest K whose mean τ(q, QRAND_K) is within `k_match_tolerance` of
    /// mean τ(q, QGE).
    pub k_match: Option<usize>,
    pub k_match_tolerance: f64,
}

pub const DEFAULT_K_MATCH_TOLERANCE: f64 = 0.05;

pub fn summarize(comparisons: &[Comparison], k_match_tolerance: f64) -> Result<ComparisonSummary> {
    let first = comparisons.first().ok_or(Error::EmptyDataset)?;
    let k_max = first.tau_qrand.len();
    let tau_qge = mean_some(comparisons.iter().map(|c| c.tau_qge));
    let tau_qrand: Vec<Option<f64>> = (0..k_max)
        .map(|k| mean_some(comparisons.iter().map(|c| c.tau_qrand[k])))
        .collect();
    let rho_qrand = (0..k_max)
        .map(|k| mean_some(comparisons.iter().map(|c| c.rho_qrand[k])))
        .collect();
    let strata = first
        .strata
        .iter()
        .enumerate()
        .map(|(s, proto)| StratumComparison {
            quantile: proto.quantile,
            size: proto.size,
            tau_qge: mean_some(comparisons.iter().map(|c| c.strata[s].tau_qge)),
            tau_qrand1: mean_some(comparisons.iter().map(|c| c.strata[s].tau_qrand1)),
            delta_tau: mean_some(comparisons.iter().map(|c| c.strata[s].delta_tau)),
        })
        .collect();

    let curve: Vec<(f64, f64)> = tau_qrand
        .iter()
        .enumerate()
        .filter_map(|(k, t)| t.map(|t| ((k + 1) as f64, t)))
        .collect();
    let k_curve_rho = if curve.len() >= 2 {
        let (ks, ts): (Vec<f64>, Vec<f64>) = curve.iter().copied().unzip();
        optional(spearman_rho(&ks, &ts))?
    } else {
        None
    };
    let k_match = tau_qge.and_then(|target| {
        tau_qrand
            .iter()
            .position(|t| t.is_some_and(|t| (t - target).abs() <= k_match_tolerance))
            .map(|k| k + 1)
    });
    Ok(ComparisonSummary {
        inputs: comparisons.len(),
        tau_qge,
        rho_qge: mean_some(comparisons.iter().map(|c| c.rho_qge)),
        tau_qrand,
        rho_qrand,
        delta_tau: mean_some(comparisons.iter().map(|c| c.delta_tau)),
        delta_rho: mean_some(comparisons.iter().map(|c| c.delta_rho)),
        strata,
        k_curve_rho,
        k_match,
        k_match_tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bins == 0 {
        return Err(Error::InvalidMetricParam("histogram needs at least one bin".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFiniteSeries(0));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = if width == 0.0 {
            0
        } else {
            (((v - lo) / width) as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count,
        })
        .collect())
}

/// Training recipes for the model conditions compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Trained,
    /// Stopped once holdout accuracy reaches a fraction of the fully trained
    /// model's accuracy.
    Undertrained,
    /// The random initialization.
    Untrained,
    /// Trained on inputs partially masked with zeros.
    OodZeros,
    /// Trained on inputs partially masked with the training feature means.
    OodMean,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Trained => "trained",
            ModelVariant::Undertrained => "undertrained",
            ModelVariant::Untrained => "untrained",
            ModelVariant::OodZeros => "ood_zeros",
            ModelVariant::OodMean => "ood_mean",
        }
    }
}

pub const DEFAULT_UNDERTRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_MASK_PROBABILITY: f64 = 0.5;

/// Trains `variant` from `init`. `undertrain_fraction` and
/// `mask_probability` only apply to the variants that use them.
pub fn train_variant(
    variant: ModelVariant,
    init: &MlpModel,
    train_set: &[Instance],
    holdout: &[Instance],
    cfg: &TrainConfig,
    undertrain_fraction: f64,
    mask_probability: f64,
) -> Result<(MlpModel, TrainReport)> {
    let mut cfg = cfg.clone();
    match variant {
        ModelVariant::Trained => {}
        ModelVariant::Untrained => cfg.epochs = 0,
        ModelVariant::Undertrained => {
            let (full, _) = train(init, train_set, holdout, &cfg)?;
            let reference = if holdout.is_empty() { train_set } else { holdout };
            cfg.early_stop = Some(EarlyStop {
                fraction: undertrain_fraction,
                target_accuracy: accuracy(&full, reference)?,
            });
        }
        ModelVariant::OodZeros => {
            cfg.mask_augment = MaskAugment::Zeros;
            cfg.mask_probability = mask_probability;
        }
        ModelVariant::OodMean => {
            cfg.mask_augment = MaskAugment::Mean(feature_mean(train_set)?);
            cfg.mask_probability = mask_probability;
        }
    }
    train(init, train_set, holdout, &cfg)
}
