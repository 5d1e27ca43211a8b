//! Meta-evaluation of quality measures under perturbation.
//!
//! A reliable measure should barely move under minor perturbations of the
//! input or model (noise resilience, NR) and should clearly react to
//! disruptive ones (adversarial reactivity, AR). For each perturbation test we
//! estimate
//!
//! - intra-consistency (IAC): agreement of a method's score distribution
//!   before and after perturbation, from Wilcoxon signed-rank p-values;
//! - inter-consistency (IEC): whether the ordering of explanation methods is
//!   kept (minor) or every score drops (disruptive);
//!
//! and summarize the vector `[IAC_NR, IAC_AR, IEC_NR, IEC_AR]` by its mean,
//! the MC score. These are simplified estimators in the style of
//! MetaQuantus, not reproductions of it.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{GroundTruthMask, Instance};
use crate::error::{Error, Result};
use crate::explain::{explain, ExplainerKind};
use crate::metrics::{BaselineKind, EvalContext, QualityMeasure};
use crate::model::{Classifier, MlpModel};
use crate::seed;
use crate::stats;
use crate::transform::{apply, TransformKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Input,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Minor,
    Disruptive,
}

impl Target {
    fn tag(self) -> u64 {
        match self {
            Target::Input => 0,
            Target::Model => 1,
        }
    }
}

impl Severity {
    fn tag(self) -> u64 {
        match self {
            Severity::Minor => 0,
            Severity::Disruptive => 1,
        }
    }
}

pub const DEFAULT_MINOR_SIGMA: f64 = 0.01;
pub const DEFAULT_TRIALS: usize = 5;
pub const DEFAULT_REPETITIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub target: Target,
    pub severity: Severity,
    pub minor_sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.minor_sigma > 0.0 && self.minor_sigma.is_finite()) {
            return Err(Error::InvalidMetricParam(format!(
                "minor_sigma must be positive, got {}",
                self.minor_sigma
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidMetricParam("at least one trial is required".into()));
        }
        Ok(())
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        seed::derive(self.seed, &[self.target.tag(), self.severity.tag(), trial as u64])
    }
}

/// Perturbed copies of `inputs` for one trial.
///
/// Minor: additive Gaussian noise with per-feature σ = `minor_sigma` × the
/// feature's standard deviation over `inputs`. Disruptive: every feature
/// resampled uniformly over its observed range.
pub fn perturb_inputs(spec: &PerturbationSpec, inputs: &[Vec<f64>], trial: usize) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let first = inputs.first().ok_or(Error::EmptyDataset)?;
    let d = first.len();
    let column = |j: usize| inputs.iter().map(|x| x[j]).collect::<Vec<_>>();
    let mut rng = seed::rng(spec.trial_seed(trial));
    match spec.severity {
        Severity::Minor => {
            let sds: Vec<f64> = (0..d).map(|j| stats::std_dev(&column(j))).collect();
            Ok(inputs
                .iter()
                .map(|x| {
                    x.iter()
                        .zip(&sds)
                        .map(|(v, sd)| {
                            let z: f64 = rng.sample(rand_distr::StandardNormal);
                            v + spec.minor_sigma * sd * z
                        })
                        .collect()
                })
                .collect())
        }
        Severity::Disruptive => {
            let ranges: Vec<(f64, f64)> = (0..d)
                .map(|j| {
                    let c = column(j);
                    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi)
                })
                .collect();
            Ok(inputs
                .iter()
                .map(|_| {
                    ranges
                        .iter()
                        .map(|&(lo, hi)| if lo < hi { rng.random_range(lo..=hi) } else { lo })
                        .collect()
                })
                .collect())
        }
    }
}

/// A perturbed copy of `model` for one trial.
///
/// Minor: per-layer Gaussian noise on weights and biases with σ =
/// `minor_sigma` × the layer's weight standard deviation. Disruptive: a fresh
/// initialization seeded by the trial.
pub fn perturb_model(spec: &PerturbationSpec, model: &MlpModel, trial: usize) -> Result<MlpModel> {
    spec.validate()?;
    let trial_seed = spec.trial_seed(trial);
    match spec.severity {
        Severity::Disruptive => Ok(model.reinitialized(trial_seed)),
        Severity::Minor => {
            let mut rng = seed::rng(trial_seed);
            let mut out = model.clone();
            for layer in out.layers_mut() {
                let sigma = spec.minor_sigma * layer.weight_std();
                if sigma == 0.0 {
                    continue;
                }
                let noise = Normal::new(0.0, sigma).expect("positive finite sigma");
                for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                    *w += noise.sample(&mut rng);
                }
            }
            Ok(out)
        }
    }
}

/// Scores indexed `[method][input]`.
pub type ScoreTable = Vec<Vec<f64>>;

fn check_tables(baseline: &[Vec<f64>], trials: &[ScoreTable]) -> Result<()> {
    for t in trials {
        if t.len() != baseline.len() {
            return Err(Error::LengthMismatch(baseline.len(), t.len()));
        }
        for (b, p) in baseline.iter().zip(t) {
            if b.len() != p.len() {
                return Err(Error::LengthMismatch(b.len(), p.len()));
            }
        }
    }
    Ok(())
}

/// Intra-consistency: mean Wilcoxon p-value between each method's baseline
/// and perturbed scores, over methods and trials. Minor severity reports `p`,
/// disruptive reports `1 − p`. Cells with too few non-zero differences are
/// skipped; `None` if every cell was skipped.
pub fn iac(baseline: &[Vec<f64>], trials: &[ScoreTable], severity: Severity) -> Result<Option<f64>> {
    check_tables(baseline, trials)?;
    let mut ps = Vec::new();
    for t in trials {
        for (b, p) in baseline.iter().zip(t) {
            match stats::wilcoxon_signed_rank(b, p) {
                Ok(v) => ps.push(v),
                Err(Error::InsufficientData { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if ps.is_empty() {
        return Ok(None);
    }
    let p = stats::mean(&ps);
    Ok(Some(match severity {
        Severity::Minor => p,
        Severity::Disruptive => 1.0 - p,
    }))
}

/// Inter-consistency. Minor: mean over (trial, input) of the fraction of
/// method pairs whose score order (including ties) survives the
/// perturbation. Disruptive: mean over (trial, method, input) of whether the
/// perturbed score is strictly lower. Scores must be oriented so that higher
/// is better.
pub fn iec(baseline: &[Vec<f64>], trials: &[ScoreTable], severity: Severity) -> Result<Option<f64>> {
    check_tables(baseline, trials)?;
    let methods = baseline.len();
    let inputs = baseline.first().map_or(0, Vec::len);
    let mut values = Vec::new();
    match severity {
        Severity::Minor => {
            if methods < 2 {
                return Err(Error::NeedTwoMethods);
            }
            let pairs = methods * (methods - 1) / 2;
            for t in trials {
                for i in 0..inputs {
                    let mut kept = 0;
                    for a in 0..methods {
                        for b in a + 1..methods {
                            let before = baseline[a][i].partial_cmp(&baseline[b][i]);
                            let after = t[a][i].partial_cmp(&t[b][i]);
                            kept += usize::from(before == after);
                        }
                    }
                    values.push(kept as f64 / pairs as f64);
                }
            }
        }
        Severity::Disruptive => {
            for t in trials {
                for (b, p) in baseline.iter().zip(t) {
                    values.extend(b.iter().zip(p).map(|(x, y)| f64::from(u8::from(y < x))));
                }
            }
        }
    }
    Ok((!values.is_empty()).then(|| stats::mean(&values)))
}

/// `[IAC_NR, IAC_AR, IEC_NR, IEC_AR]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVector {
    pub iac_nr: f64,
    pub iac_ar: f64,
    pub iec_nr: f64,
    pub iec_ar: f64,
}

impl ConsistencyVector {
    pub fn components(&self) -> [(&'static str, f64); 4] {
        [
            ("iac_nr", self.iac_nr),
            ("iac_ar", self.iac_ar),
            ("iec_nr", self.iec_nr),
            ("iec_ar", self.iec_ar),
        ]
    }
}

/// Mean of the four components, i.e. the projection onto the ideal vector
/// `1⁴` divided by its dimension.
pub fn mc_score(v: &ConsistencyVector) -> Result<f64> {
    let mut sum = 0.0;
    for (name, value) in v.components() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidComponent { name, value });
        }
        sum += value;
    }
    Ok(sum / 4.0)
}

/// Components of one perturbation test; `None` marks a skipped cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialVector {
    pub iac_nr: Option<f64>,
    pub iac_ar: Option<f64>,
    pub iec_nr: Option<f64>,
    pub iec_ar: Option<f64>,
}

impl PartialVector {
    fn cells(&self) -> [Option<f64>; 4] {
        [self.iac_nr, self.iac_ar, self.iec_nr, self.iec_ar]
    }

    pub fn is_complete(&self) -> bool {
        self.cells().iter().all(Option::is_some)
    }

    /// Skipped cells count as 0.
    pub fn filled(&self) -> ConsistencyVector {
        ConsistencyVector {
            iac_nr: self.iac_nr.unwrap_or(0.0),
            iac_ar: self.iac_ar.unwrap_or(0.0),
            iec_nr: self.iec_nr.unwrap_or(0.0),
            iec_ar: self.iec_ar.unwrap_or(0.0),
        }
    }

    /// Cellwise mean over the vectors that have the cell.
    fn mean_of(vectors: &[PartialVector]) -> PartialVector {
        let cell = |f: fn(&PartialVector) -> Option<f64>| {
            let v: Vec<f64> = vectors.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| stats::mean(&v))
        };
        PartialVector {
            iac_nr: cell(|v| v.iac_nr),
            iac_ar: cell(|v| v.iac_ar),
            iec_nr: cell(|v| v.iec_nr),
            iec_ar: cell(|v| v.iec_ar),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEvalConfig {
    pub explainers: Vec<ExplainerKind>,
    pub minor_sigma: f64,
    pub trials: usize,
    pub repetitions: usize,
    pub baseline: BaselineKind,
    pub seed: u64,
}

impl Default for MetaEvalConfig {
    fn default() -> Self {
        Self {
            explainers: ExplainerKind::gradient_family().to_vec(),
            minor_sigma: DEFAULT_MINOR_SIGMA,
            trials: DEFAULT_TRIALS,
            repetitions: DEFAULT_REPETITIONS,
            baseline: BaselineKind::Zeros,
            seed: 0,
        }
    }
}

/// Result of one perturbation target (input or model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub target: Target,
    /// Cellwise mean over repetitions.
    pub vector: PartialVector,
    pub mc: f64,
    pub repetitions: Vec<PartialVector>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    /// Some cell was skipped or some score came from a degenerate evaluation.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEvalReport {
    pub metric: String,
    pub transform: TransformKind,
    pub tests: Vec<TestReport>,
    /// Mean MC over the input and model tests.
    pub mc: f64,
    pub degenerate: bool,
}

#[derive(Debug, Serialize)]
struct ComponentRow<'a> {
    metric: &'a str,
    transform: &'a str,
    k: Option<usize>,
    target: Target,
    component: &'static str,
    value: Option<f64>,
    mc: f64,
}

impl MetaEvalReport {
    /// One row per (test, component), for area plots.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let k = match self.transform {
            TransformKind::Qrand { k, .. } => Some(k),
            _ => None,
        };
        let mut w = csv::Writer::from_writer(out);
        for t in &self.tests {
            let names = ["iac_nr", "iac_ar", "iec_nr", "iec_ar"];
            for (component, value) in names.into_iter().zip(t.vector.cells()) {
                w.serialize(ComponentRow {
                    metric: &self.metric,
                    transform: self.transform.id(),
                    k,
                    target: t.target,
                    component,
                    value,
                    mc: t.mc,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io("<metaeval csv>", e))?;
        Ok(())
    }
}

const TAG_SCORE: u64 = 1;
const TAG_METRIC: u64 = 2;
const TAG_PERTURB: u64 = 3;

struct Scorer<'a, M: ?Sized> {
    measure: &'a M,
    transform: TransformKind,
    explainers: &'a [ExplainerKind],
    baseline: &'a BaselineKind,
    masks: Option<&'a [GroundTruthMask]>,
    classes: &'a [usize],
    seed: u64,
}

impl<M: QualityMeasure + ?Sized> Scorer<'_, M> {
    /// Transformed scores of every (method, input); the explained class and
    /// all random streams depend only on (method, input), so baseline and
    /// perturbed tables are paired.
    fn table(&self, model: &dyn Classifier, inputs: &[Vec<f64>]) -> Result<(ScoreTable, bool)> {
        let n = inputs.len();
        let cells: Vec<(f64, bool)> = (0..self.explainers.len() * n)
            .into_par_iter()
            .map(|cell| {
                let (m, i) = (cell / n, cell % n);
                let x = &inputs[i];
                let class = self.classes[i];
                let score_seed = seed::derive(self.seed, &[TAG_SCORE, m as u64, i as u64]);
                let e = explain(self.explainers[m], model, x, class, score_seed)?;
                let ctx = EvalContext::new(model, x, class, self.baseline)
                    .with_mask(self.masks.map(|ms| &ms[i]))
                    .with_seed(seed::derive(self.seed, &[TAG_METRIC, i as u64]));
                let transform = match self.transform {
                    TransformKind::Qrand { k, seed: s } => TransformKind::Qrand {
                        k,
                        seed: seed::derive(s, &[self.seed, m as u64, i as u64]),
                    },
                    t => t,
                };
                match apply(transform, self.measure, &ctx, &e) {
                    Ok(r) => Ok((r.qt, r.degenerate)),
                    // No positive attribution at all: nothing is localized.
                    Err(Error::AllNonPositive) => Ok((0.0, true)),
                    Err(err) => Err(err),
                }
            })
            .collect::<Result<_>>()?;
        let degenerate = cells.iter().any(|c| c.1);
        let table = cells
            .chunks(n)
            .map(|row| row.iter().map(|c| c.0).collect())
            .collect();
        Ok((table, degenerate))
    }
}

/// Runs the input and model perturbation tests for one measure/transform.
///
/// Inputs are explained for the class the unperturbed model predicts on the
/// unperturbed input; the class is held fixed under perturbation.
pub fn run_metaeval<M: QualityMeasure + ?Sized>(
    measure: &M,
    transform: TransformKind,
    model: &MlpModel,
    inputs: &[Instance],
    masks: Option<&[GroundTruthMask]>,
    config: &MetaEvalConfig,
) -> Result<MetaEvalReport> {
    transform.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.explainers.is_empty() {
        return Err(Error::InvalidMetricParam("no explainers configured".into()));
    }
    if config.repetitions == 0 {
        return Err(Error::InvalidMetricParam("at least one repetition is required".into()));
    }
    if let Some(ms) = masks {
        if ms.len() != inputs.len() {
            return Err(Error::LengthMismatch(inputs.len(), ms.len()));
        }
    }
    let xs: Vec<Vec<f64>> = inputs.iter().map(|i| i.features.clone()).collect();
    let classes = xs
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<Vec<_>>>()?;

    let mut tests = Vec::new();
    for target in [Target::Input, Target::Model] {
        let mut per_rep = Vec::with_capacity(config.repetitions);
        let mut seeds = Vec::with_capacity(config.repetitions);
        let mut degenerate = false;
        for rep in 0..config.repetitions {
            let rep_seed = seed::derive(config.seed, &[rep as u64]);
            seeds.push(rep_seed);
            let scorer = Scorer {
                measure,
                transform,
                explainers: &config.explainers,
                baseline: &config.baseline,
                masks,
                classes: &classes,
                seed: rep_seed,
            };
            let (baseline, deg) = scorer.table(model, &xs)?;
            degenerate |= deg;
            let mut vector = PartialVector {
                iac_nr: None,
                iac_ar: None,
                iec_nr: None,
                iec_ar: None,
            };
            for severity in [Severity::Minor, Severity::Disruptive] {
                let spec = PerturbationSpec {
                    target,
                    severity,
                    minor_sigma: config.minor_sigma,
                    trials: config.trials,
                    seed: seed::derive(rep_seed, &[TAG_PERTURB]),
                };
                spec.validate()?;
                let mut tables = Vec::with_capacity(config.trials);
                for trial in 0..config.trials {
                    let (table, deg) = match target {
                        Target::Input => scorer.table(model, &perturb_inputs(&spec, &xs, trial)?)?,
                        Target::Model => scorer.table(&perturb_model(&spec, model, trial)?, &xs)?,
                    };
                    degenerate |= deg;
                    tables.push(table);
                }
                let a = iac(&baseline, &tables, severity)?;
                let e = if severity == Severity::Minor && config.explainers.len() < 2 {
                    None
                } else {
                    iec(&baseline, &tables, severity)?
                };
                match severity {
                    Severity::Minor => (vector.iac_nr, vector.iec_nr) = (a, e),
                    Severity::Disruptive => (vector.iac_ar, vector.iec_ar) = (a, e),
                }
            }
            degenerate |= !vector.is_complete();
            per_rep.push(vector);
        }
        let vector = PartialVector::mean_of(&per_rep);
        tests.push(TestReport {
            target,
            mc: mc_score(&vector.filled())?,
            vector,
            repetitions: per_rep,
            trials: config.trials,
            seeds,
            degenerate,
        });
    }
    let mc = stats::mean(&tests.iter().map(|t| t.mc).collect::<Vec<_>>());
    Ok(MetaEvalReport {
        metric: measure.name().to_string(),
        transform,
        degenerate: tests.iter().any(|t| t.degenerate),
        tests,
        mc,
    })
}
