//! Experiment configuration: one JSON document with the sections `data`,
//! `model`, `explain`, `metric`, `transform`, `stats`, `metaeval` and
//! `output`, plus a master `seed`. Unknown keys are rejected.
//!
//! Every seed the run uses is derived from the master seed, so `--seed`
//! re-seeds the whole experiment at once.

use std::path::{Path, PathBuf};

use qge_core::data::CsvSchema;
use qge_core::experiment::{
    ExplorationMode, ModelVariant, DEFAULT_K_MATCH_TOLERANCE, DEFAULT_MASK_PROBABILITY,
    DEFAULT_UNDERTRAIN_FRACTION,
};
use qge_core::explain::MAX_EXHAUSTIVE_FEATURES;
use qge_core::metaeval::{DEFAULT_MINOR_SIGMA, DEFAULT_REPETITIONS, DEFAULT_TRIALS};
use qge_core::model::{MaskAugment, TrainConfig};
use qge_core::stats::DEFAULT_QUANTILES;
use qge_core::{seed, ExplainerKind, MetricKind};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub metric: MetricSection,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub metaeval: MetaevalSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Blobs {
        dim: usize,
        classes: usize,
        n: usize,
        separation: f64,
    },
    Localization {
        height: usize,
        width: usize,
        n: usize,
        patch: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceConfig,
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
    /// How many holdout instances to explain.
    #[serde(default = "default_inputs")]
    pub inputs: usize,
}

fn default_holdout_fraction() -> f64 {
    0.25
}

fn default_inputs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub variants: Vec<ModelVariant>,
    pub undertrain_fraction: f64,
    pub mask_probability: f64,
    /// Load `<dir>/models/<variant>.json` (written by `train`) instead of
    /// training.
    pub load_dir: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: vec![32],
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            variants: vec![ModelVariant::Trained],
            undertrain_fraction: DEFAULT_UNDERTRAIN_FRACTION,
            mask_probability: DEFAULT_MASK_PROBABILITY,
            load_dir: None,
        }
    }
}

impl ModelSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed,
            mask_augment: MaskAugment::None,
            mask_probability: 0.0,
            early_stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub mode: ExplorationMode,
    /// Explanation methods compared by the meta-evaluation.
    pub explainers: Vec<ExplainerKind>,
    /// Group square `block × block` cells of an image grid into one unit.
    pub group_block: Option<usize>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            mode: ExplorationMode::Exhaustive,
            explainers: ExplainerKind::gradient_family().to_vec(),
            group_block: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineChoice {
    Zeros,
    /// Per-feature mean of the training split.
    FeatureMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub measures: Vec<MetricKind>,
    pub baseline: BaselineChoice,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            measures: vec![MetricKind::PixelFlipping],
            baseline: BaselineChoice::Zeros,
        }
    }
}

/// A transform without its random seed; seeds come from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformChoice {
    None,
    Qge,
    Qrand { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSection {
    /// Largest K of the QRAND_K sweep in `explore` and `compare`.
    pub k_max: usize,
    /// Transforms evaluated by `metaeval`.
    pub apply: Vec<TransformChoice>,
}

impl Default for TransformSection {
    fn default() -> Self {
        Self {
            k_max: 10,
            apply: vec![TransformChoice::Qrand { k: 1 }, TransformChoice::Qge],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub quantiles: Vec<f64>,
    pub k_match_tolerance: f64,
    pub histogram_bins: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            quantiles: DEFAULT_QUANTILES.to_vec(),
            k_match_tolerance: DEFAULT_K_MATCH_TOLERANCE,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaevalSection {
    pub minor_sigma: f64,
    pub trials: usize,
    pub repetitions: usize,
}

impl Default for MetaevalSection {
    fn default() -> Self {
        Self {
            minor_sigma: DEFAULT_MINOR_SIGMA,
            trials: DEFAULT_TRIALS,
            repetitions: DEFAULT_REPETITIONS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Seed streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Init = 3,
    Train = 4,
    Explore = 5,
    Metaeval = 6,
    Transform = 7,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses and validates; errors name the offending field path.
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Failure::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |field: &str, msg: &str| Err(Failure::Config(format!("{field}: {msg}")));
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return bad("data.holdout_fraction", "must be in [0, 1)");
        }
        if self.data.inputs == 0 {
            return bad("data.inputs", "must be positive");
        }
        if self.model.variants.is_empty() {
            return bad("model.variants", "must not be empty");
        }
        if !(self.model.undertrain_fraction > 0.0 && self.model.undertrain_fraction <= 1.0) {
            return bad("model.undertrain_fraction", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.model.mask_probability) {
            return bad("model.mask_probability", "must be in [0, 1]");
        }
        if let Err(e) = self.model.train_config(0).validate(1) {
            return bad("model", &e.to_string());
        }
        if let ExplorationMode::Sampled { samples: 0 } = self.explain.mode {
            return bad("explain.mode.samples", "must be positive");
        }
        if self.explain.explainers.is_empty() {
            return bad("explain.explainers", "must not be empty");
        }
        if self.explain.group_block == Some(0) {
            return bad("explain.group_block", "must be positive");
        }
        if self.metric.measures.is_empty() {
            return bad("metric.measures", "must not be empty");
        }
        if self.transform.k_max == 0 {
            return bad("transform.k_max", "must be positive");
        }
        if self.transform.apply.contains(&TransformChoice::Qrand { k: 0 }) {
            return bad("transform.apply", "qrand needs k >= 1");
        }
        if self
            .stats
            .quantiles
            .iter()
            .any(|&p| !(p > 0.0 && p <= 1.0))
        {
            return bad("stats.quantiles", "every quantile must be in (0, 1]");
        }
        if self.stats.histogram_bins == 0 {
            return bad("stats.histogram_bins", "must be positive");
        }
        if self.stats.k_match_tolerance.is_nan() || self.stats.k_match_tolerance < 0.0 {
            return bad("stats.k_match_tolerance", "must be non-negative");
        }
        if self.metaeval.trials == 0 {
            return bad("metaeval.trials", "must be positive");
        }
        if self.metaeval.repetitions == 0 {
            return bad("metaeval.repetitions", "must be positive");
        }
        if !(self.metaeval.minor_sigma > 0.0 && self.metaeval.minor_sigma.is_finite()) {
            return bad("metaeval.minor_sigma", "must be positive");
        }
        if let SourceConfig::Blobs { dim, .. } = self.data.source {
            let exhaustive = self.explain.mode == ExplorationMode::Exhaustive;
            if exhaustive && dim > MAX_EXHAUSTIVE_FEATURES {
                return bad(
                    "explain.mode",
                    &format!(
                        "exhaustive enumeration of {dim}! rankings refused (limit is \
                         {MAX_EXHAUSTIVE_FEATURES} features); use {{\"mode\":\"sampled\"}}"
                    ),
                );
            }
        }
        Ok(())
    }

    pub fn seed(&self, stream: Stream) -> u64 {
        seed::derive(self.seed, &[stream as u64])
    }

    /// Hash identifying the experiment; the output location is excluded so
    /// that moving a run does not change its rows.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        c.model.load_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        seed::content_hash(&bytes)
    }
}

/// Stable numeric id of a model variant, used in seed paths.
pub fn variant_code(v: ModelVariant) -> u64 {
    match v {
        ModelVariant::Trained => 0,
        ModelVariant::Undertrained => 1,
        ModelVariant::Untrained => 2,
        ModelVariant::OodZeros => 3,
        ModelVariant::OodMean => 4,
    }
}
