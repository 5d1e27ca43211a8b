//! Quality transforms `qt`: QGE and QRAND_K.
//!
//! Both position `q(e)` against the quality of other explanations of the same
//! prediction. QGE compares with the single inverse explanation (two
//! evaluations of Ψ); QRAND_K compares with the mean of K random explanations
//! (K + 1 evaluations).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionVector;
use crate::error::{Error, Result};
use crate::explain::sample_explanations;
use crate::metrics::{EvalContext, QualityMeasure};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformKind {
    /// `qt = q`.
    None,
    Qge,
    Qrand { k: usize, seed: u64 },
}

impl TransformKind {
    pub fn id(&self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Qge => "qge",
            TransformKind::Qrand { .. } => "qrand",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TransformKind::Qrand { k: 0, .. } => {
                Err(Error::InvalidTransform("qrand needs K >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of Ψ evaluations one application costs.
    pub fn measure_calls(&self) -> usize {
        match self {
            TransformKind::None => 1,
            TransformKind::Qge => 2,
            TransformKind::Qrand { k, .. } => k + 1,
        }
    }
}

/// `q(e)` and its transform for one explanation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transformed {
    pub q: f64,
    pub qt: f64,
    /// Set if any underlying evaluation was degenerate.
    pub degenerate: bool,
}

pub(crate) fn orient<M: QualityMeasure + ?Sized>(measure: &M, v: f64) -> f64 {
    if measure.higher_is_better() {
        v
    } else {
        -v
    }
}

/// Applies `transform` to `e`. The `Qrand` seed selects the random
/// explanations; callers should give each explanation its own seed.
pub fn apply<M: QualityMeasure + ?Sized>(
    transform: TransformKind,
    measure: &M,
    ctx: &EvalContext<'_>,
    e: &AttributionVector,
) -> Result<Transformed> {
    transform.validate()?;
    let base = measure.evaluate(ctx, e)?;
    let q = orient(measure, base.value);
    let mut degenerate = base.degenerate;
    let qt = match transform {
        TransformKind::None => q,
        TransformKind::Qge => {
            let inv = measure.evaluate(ctx, &e.inverted())?;
            degenerate |= inv.degenerate;
            q - orient(measure, inv.value)
        }
        TransformKind::Qrand { k, seed } => {
            let mut sum = 0.0;
            for r in sample_explanations(e.len(), k, seed) {
                let s = measure.evaluate(ctx, &r)?;
                degenerate |= s.degenerate;
                sum += orient(measure, s.value);
            }
            q - sum / k as f64
        }
    };
    Ok(Transformed { q, qt, degenerate })
}

/// Quality Gap Estimate: `Ψ(e) − Ψ(e_inv)`.
pub fn qge<M: QualityMeasure + ?Sized>(
    measure: &M,
    ctx: &EvalContext<'_>,
    e: &AttributionVector,
) -> Result<f64> {
    Ok(apply(TransformKind::Qge, measure, ctx, e)?.qt)
}

/// `Ψ(e)` minus the mean quality of `k` random explanations.
pub fn qrand_k<M: QualityMeasure + ?Sized>(
    measure: &M,
    ctx: &EvalContext<'_>,
    e: &AttributionVector,
    k: usize,
    seed: u64,
) -> Result<f64> {
    Ok(apply(TransformKind::Qrand { k, seed }, measure, ctx, e)?.qt)
}

/// `q(e)` and QRAND_K for every `K` in `1..=k_max` from one shared set of
/// `k_max` random explanations (`k_max + 1` evaluations). QRAND_K uses the
/// first `K` samples, exactly as [`qrand_k`] with the same seed would.
pub fn qrand_sweep<M: QualityMeasure + ?Sized>(
    measure: &M,
    ctx: &EvalContext<'_>,
    e: &AttributionVector,
    k_max: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if k_max == 0 {
        return Err(Error::InvalidTransform("qrand needs K >= 1".into()));
    }
    let q = orient(measure, measure.evaluate(ctx, e)?.value);
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(k_max);
    for (i, r) in sample_explanations(e.len(), k_max, seed).iter().enumerate() {
        sum += orient(measure, measure.evaluate(ctx, r)?.value);
        out.push(q - sum / (i + 1) as f64);
    }
    Ok((q, out))
}

/// Aligned `q` and `qt` over a set of explanations of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub transform: TransformKind,
    pub q: Vec<f64>,
    pub qt: Vec<f64>,
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Serialize)]
struct SeriesRow {
    explanation_id: usize,
    q: f64,
    qt: f64,
    transform: &'static str,
    #[serde(rename = "K")]
    k: Option<usize>,
    seed: Option<u64>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let (k, seed) = match self.transform {
            TransformKind::Qrand { k, seed } => (Some(k), Some(seed)),
            _ => (None, None),
        };
        let mut w = csv::Writer::from_writer(out);
        for (i, (&q, &qt)) in self.q.iter().zip(&self.qt).enumerate() {
            w.serialize(SeriesRow {
                explanation_id: i,
                q,
                qt,
                transform: self.transform.id(),
                k,
                seed,
            })?;
        }
        w.flush().map_err(|e| Error::io("<series csv>", e))?;
        Ok(())
    }
}

/// Evaluates `transform` over many explanations in parallel.
///
/// For `Qrand`, explanation `i` draws its random explanations from
/// `derive(seed, [i])`, so no two explanations share samples and the result
/// does not depend on the thread count.
pub fn transform_series<M: QualityMeasure + ?Sized>(
    transform: TransformKind,
    measure: &M,
    ctx: &EvalContext<'_>,
    explanations: &[AttributionVector],
) -> Result<ScoreSeries> {
    if explanations.is_empty() {
        return Err(Error::EmptyDataset);
    }
    transform.validate()?;
    let results = explanations
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let per_item = match transform {
                TransformKind::Qrand { k, seed: s } => TransformKind::Qrand {
                    k,
                    seed: seed::derive(s, &[i as u64]),
                },
                other => other,
            };
            apply(per_item, measure, ctx, e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSeries {
        transform,
        q: results.iter().map(|r| r.q).collect(),
        qt: results.iter().map(|r| r.qt).collect(),
        degenerate: results.iter().map(|r| r.degenerate).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::enumerate_rankings;
    use crate::metrics::{BaselineKind, CountingMeasure, MetricKind};
    use crate::model::{Classifier, ConstantModel, LinearProbabilityHead, MlpModel};

    fn av(v: &[f64]) -> AttributionVector {
        AttributionVector::new(v.to_vec()).unwrap()
    }

    fn blend_head() -> LinearProbabilityHead {
        LinearProbabilityHead::single(vec![0.8, 0.2]).unwrap()
    }

    #[test]
    fn qge_hand_value() {
        let head = blend_head();
        let x = [1.0, 1.0];
        let ctx = EvalContext::new(&head, &x, 0, &BaselineKind::Zeros);
        let v = qge(&MetricKind::PixelFlipping, &ctx, &av(&[2.0, 1.0])).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert!((qge(&MetricKind::PixelFlipping, &ctx, &av(&[1.0, 2.0])).unwrap() + 0.3).abs() < 1e-15);
    }

    #[test]
    fn qge_vanishes_for_symmetric_models_and_single_features() {
        let model = LinearProbabilityHead::single(vec![0.25; 4]).unwrap();
        let x = [1.0; 4];
        let ctx = EvalContext::new(&model, &x, 0, &BaselineKind::Zeros);
        assert_eq!(qge(&MetricKind::PixelFlipping, &ctx, &av(&[0.1, 0.7, 0.3, 0.5])).unwrap(), 0.0);

        let one = LinearProbabilityHead::single(vec![0.9]).unwrap();
        let ctx = EvalContext::new(&one, &[2.0], 0, &BaselineKind::Zeros);
        assert_eq!(qge(&MetricKind::PixelFlipping, &ctx, &av(&[3.0])).unwrap(), 0.0);
    }

    #[test]
    fn qrand_on_constant_model_is_zero() {
        let model = ConstantModel::new(3, vec![0.4, 0.6]).unwrap();
        let x = [1.0, 2.0, 3.0];
        let ctx = EvalContext::new(&model, &x, 1, &BaselineKind::Zeros);
        for (k, s) in [(1, 0), (5, 9), (10, 123)] {
            let v = qrand_k(&MetricKind::PixelFlipping, &ctx, &av(&[0.3, 0.1, 0.2]), k, s).unwrap();
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn qrand_converges_to_the_exhaustive_expectation() {
        let head = blend_head();
        let x = [1.0, 1.0];
        let ctx = EvalContext::new(&head, &x, 0, &BaselineKind::Zeros);
        let e = av(&[2.0, 1.0]);
        let pf = MetricKind::PixelFlipping;
        let exhaustive: f64 = enumerate_rankings(2, None)
            .unwrap()
            .map(|r| pf.evaluate(&ctx, &r.to_attribution()).unwrap().value)
            .sum::<f64>()
            / 2.0;
        let oracle = pf.evaluate(&ctx, &e).unwrap().value - exhaustive;
        assert!((oracle - 0.15).abs() < 1e-15);

        let seeds = 20;
        let mean = (0..seeds)
            .map(|s| qrand_k(&pf, &ctx, &e, 1000, s).unwrap())
            .sum::<f64>()
            / seeds as f64;
        assert!((mean - 0.15).abs() < 0.01, "{mean}");
    }

    #[test]
    fn evaluation_counts() {
        let model = MlpModel::new(5, &[4], 2, 3).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let ctx = EvalContext::new(&model, &x, 0, &BaselineKind::Zeros);
        let counted = CountingMeasure::new(MetricKind::PixelFlipping);
        let e = av(&[0.5, 0.1, 0.9, 0.3, 0.7]);
        qge(&counted, &ctx, &e).unwrap();
        assert_eq!(counted.calls(), 2);
        for k in [1, 5, 10] {
            counted.reset();
            qrand_k(&counted, &ctx, &e, k, 4).unwrap();
            assert_eq!(counted.calls(), k + 1);
        }
        counted.reset();
        let (_, sweep) = qrand_sweep(&counted, &ctx, &e, 10, 4).unwrap();
        assert_eq!(counted.calls(), 11);
        for k in [1, 5, 10] {
            let single = qrand_k(&MetricKind::PixelFlipping, &ctx, &e, k, 4).unwrap();
            assert!((sweep[k - 1] - single).abs() < 1e-14);
        }
        for t in [TransformKind::None, TransformKind::Qge, TransformKind::Qrand { k: 3, seed: 0 }] {
            counted.reset();
            apply(t, &counted, &ctx, &e).unwrap();
            assert_eq!(counted.calls(), t.measure_calls());
        }
    }

    #[test]
    fn qge_is_antisymmetric_and_zero_centered() {
        let model = MlpModel::new(5, &[6], 3, 21).unwrap();
        let x = [0.5, -1.0, 1.5, 0.2, -0.3];
        let class = model.predict(&x).unwrap();
        let ctx = EvalContext::new(&model, &x, class, &BaselineKind::Zeros);
        let rankings: Vec<AttributionVector> =
            enumerate_rankings(5, None).unwrap().map(|r| r.to_attribution()).collect();
        let series = transform_series(TransformKind::Qge, &MetricKind::PixelFlipping, &ctx, &rankings).unwrap();
        let mean = series.qt.iter().sum::<f64>() / series.len() as f64;
        assert!(mean.abs() < 1e-12);
        let pf = MetricKind::PixelFlipping;
        for (i, e) in rankings.iter().enumerate() {
            let v = series.qt[i];
            assert_eq!(v, -qge(&pf, &ctx, &e.inverted()).unwrap());
            let q_inv = pf.evaluate(&ctx, &e.inverted()).unwrap().value;
            assert_eq!(v > 0.0, series.q[i] > q_inv);
        }
    }

    #[test]
    fn series_identity_cardinality_and_thread_independence() {
        let model = MlpModel::new(4, &[5], 2, 2).unwrap();
        let x = [1.0, -0.5, 0.25, 2.0];
        let ctx = EvalContext::new(&model, &x, 1, &BaselineKind::Zeros);
        let rankings: Vec<AttributionVector> =
            enumerate_rankings(4, None).unwrap().map(|r| r.to_attribution()).collect();
        let pf = MetricKind::PixelFlipping;

        let none = transform_series(TransformKind::None, &pf, &ctx, &rankings).unwrap();
        assert_eq!(none.q, none.qt);
        let qge = transform_series(TransformKind::Qge, &pf, &ctx, &rankings).unwrap();
        assert_eq!(qge.len(), 24);

        let t = TransformKind::Qrand { k: 3, seed: 17 };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| transform_series(t, &pf, &ctx, &rankings).unwrap())
        };
        assert_eq!(run(1), run(4));
        assert!(transform_series(t, &pf, &ctx, &[]).is_err());
        assert!(transform_series(TransformKind::Qrand { k: 0, seed: 0 }, &pf, &ctx, &rankings).is_err());
    }

    #[test]
    fn series_csv_and_serde() {
        let series = ScoreSeries {
            transform: TransformKind::Qrand { k: 2, seed: 5 },
            q: vec![0.5],
            qt: vec![0.1],
            degenerate: vec![false],
        };
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "explanation_id,q,qt,transform,K,seed\n0,0.5,0.1,qrand,2,5\n"
        );
        let t: TransformKind = serde_json::from_str(r#"{"kind":"qrand","k":4,"seed":1}"#).unwrap();
        assert_eq!(t, TransformKind::Qrand { k: 4, seed: 1 });
        assert!(serde_json::from_str::<TransformKind>(r#"{"kind":"qrand","k":4}"#).is_err());
    }
}
