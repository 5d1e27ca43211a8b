//! Quality Gap Estimate (QGE) toolkit for evaluating feature-attribution
//! explanations.
//!
//! A quality measure Ψ scores one explanation of one prediction. On its own
//! that score says little about how the explanation compares with the other
//! explanations that were possible. This crate provides transforms that place
//! a score in context:
//!
//! * **QGE**: `Ψ(e) − Ψ(e_inv)`, where `e_inv` ranks the features in reverse
//!   order. Costs two evaluations of Ψ.
//! * **QRAND_K**: `Ψ(e)` minus the mean quality of `K` random explanations.
//!   Costs `K + 1` evaluations.
//!
//! Around them sit the pieces needed to study the transforms: a small MLP
//! engine with exact input gradients, gradient explainers, exhaustive ranking
//! enumeration, faithfulness and localization measures, rank statistics, and
//! a meta-evaluation harness.

pub mod attribution;
pub mod data;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod metaeval;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod stats;
pub mod transform;

pub use attribution::{
    argsort_stable, invert_explanation, negate_explanation, ranking_descending, AttributionVector,
    FeatureGrouping, FeatureRanking, GroundTruthMask, Instance, QualityScore,
};
pub use error::{Error, Result};
pub use explain::ExplainerKind;
pub use metrics::{BaselineKind, EvalContext, MetricKind, QualityMeasure};
pub use model::{Classifier, LinearSoftmaxModel, MlpModel, TrainConfig};
pub use transform::{qge, qrand_k, ScoreSeries, TransformKind};

