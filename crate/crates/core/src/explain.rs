//! Explanation producers: gradient explainers, random attributions, and the
//! exhaustive / sampled explanation spaces explored by the experiments.

use std::io::Write;
use std::ops::Range;

use rand::distr::Open01;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionVector, FeatureRanking};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::seed;

/// Path steps used by integrated gradients.
pub const IG_STEPS: usize = 20;

/// Largest feature count for which exhaustive enumeration is allowed.
pub const MAX_EXHAUSTIVE_FEATURES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    Random,
    Saliency,
    InputXGradient,
    IntegratedGradients,
    OracleLinear,
}

impl ExplainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExplainerKind::Random => "random",
            ExplainerKind::Saliency => "saliency",
            ExplainerKind::InputXGradient => "input_x_gradient",
            ExplainerKind::IntegratedGradients => "integrated_gradients",
            ExplainerKind::OracleLinear => "oracle_linear",
        }
    }

    /// The gradient explainers used by the meta-evaluation by default.
    pub fn gradient_family() -> [ExplainerKind; 3] {
        [
            ExplainerKind::Saliency,
            ExplainerKind::IntegratedGradients,
            ExplainerKind::InputXGradient,
        ]
    }
}

impl std::fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Explains the model's output for `class` at `x`.
///
/// `seed` only affects [`ExplainerKind::Random`].
pub fn explain(
    kind: ExplainerKind,
    model: &dyn Classifier,
    x: &[f64],
    class: usize,
    seed: u64,
) -> Result<AttributionVector> {
    match kind {
        ExplainerKind::Random => {
            if x.len() != model.input_dim() {
                return Err(Error::shape(model.input_dim(), x.len(), "model input"));
            }
            Ok(sample_explanations(x.len(), 1, seed).remove(0))
        }
        ExplainerKind::Saliency => saliency(model, x, class),
        ExplainerKind::InputXGradient => input_x_gradient(model, x, class),
        ExplainerKind::IntegratedGradients => {
            integrated_gradients(model, x, class, &vec![0.0; x.len()], IG_STEPS)
        }
        ExplainerKind::OracleLinear => {
            let linear = model
                .as_linear()
                .ok_or(Error::UnsupportedExplainer(kind.as_str()))?;
            if class >= linear.class_count() {
                return Err(Error::ClassOutOfRange {
                    class,
                    classes: linear.class_count(),
                });
            }
            AttributionVector::new(linear.weights()[class].clone())
        }
    }
}

/// |∂f_y/∂x|
pub fn saliency(model: &dyn Classifier, x: &[f64], class: usize) -> Result<AttributionVector> {
    let g = model.input_gradient(x, class)?;
    AttributionVector::new(g.into_iter().map(f64::abs).collect())
}

/// x ⊙ ∂f_y/∂x
pub fn input_x_gradient(model: &dyn Classifier, x: &[f64], class: usize) -> Result<AttributionVector> {
    let g = model.input_gradient(x, class)?;
    AttributionVector::new(g.iter().zip(x).map(|(g, x)| g * x).collect())
}

/// (x − b) ⊙ mean of ∂f_y/∂x at the right endpoints `b + (s/steps)(x − b)`,
/// `s = 1..=steps`.
pub fn integrated_gradients(
    model: &dyn Classifier,
    x: &[f64],
    class: usize,
    baseline: &[f64],
    steps: usize,
) -> Result<AttributionVector> {
    if baseline.len() != x.len() {
        return Err(Error::shape(x.len(), baseline.len(), "integrated gradients baseline"));
    }
    if steps == 0 {
        return Err(Error::InvalidMetricParam("integrated gradients needs at least one step".into()));
    }
    let delta: Vec<f64> = x.iter().zip(baseline).map(|(x, b)| x - b).collect();
    let mut sum = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for s in 1..=steps {
        let alpha = s as f64 / steps as f64;
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&delta) {
            *p = b + alpha * d;
        }
        for (acc, g) in sum.iter_mut().zip(model.input_gradient(&point, class)?) {
            *acc += g;
        }
    }
    AttributionVector::new(
        sum.iter()
            .zip(&delta)
            .map(|(g, d)| d * g / steps as f64)
            .collect(),
    )
}

/// `n` i.i.d. uniform(0,1)^`d` explanations. Vectors are drawn sequentially
/// from one stream, so the first `k` of a sample of size `n ≥ k` equal a
/// sample of size `k` with the same seed.
pub fn sample_explanations(d: usize, n: usize, seed: u64) -> Vec<AttributionVector> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            let values = (0..d).map(|_| rng.sample::<f64, _>(Open01)).collect();
            AttributionVector::new(values).expect("open-interval samples are finite")
        })
        .collect()
}

pub fn factorial(d: usize) -> u64 {
    (1..=d as u64).product()
}

/// The `index`-th permutation of `0..d` in lexicographic order.
pub fn nth_permutation(d: usize, mut index: u64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..d).collect();
    let mut out = Vec::with_capacity(d);
    for remaining in (1..=d).rev() {
        let block = factorial(remaining - 1);
        let pick = (index / block) as usize;
        index %= block;
        out.push(pool.remove(pick));
    }
    out
}

/// Rearranges `a` into its lexicographic successor; false if `a` was last.
pub fn next_permutation(a: &mut [usize]) -> bool {
    let n = a.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

/// Splits `0..total` into `chunks` contiguous, nearly equal ranges.
pub fn chunk_ranges(total: u64, chunks: usize) -> Vec<Range<u64>> {
    let chunks = chunks.max(1) as u64;
    (0..chunks)
        .map(|c| (total * c / chunks)..(total * (c + 1) / chunks))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Lexicographic stream over the rankings of `d` features, optionally
/// restricted to the index range `[start, end)` of the full `d!` sequence.
#[derive(Debug, Clone)]
pub struct PermutationStream {
    current: Vec<usize>,
    remaining: u64,
}

impl PermutationStream {
    pub fn new(d: usize, chunk: Option<Range<u64>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidRanking("need at least one feature".into()));
        }
        if d > MAX_EXHAUSTIVE_FEATURES {
            return Err(Error::RefuseExhaustive { features: d });
        }
        let total = factorial(d);
        let range = chunk.unwrap_or(0..total);
        if range.start > range.end || range.end > total {
            return Err(Error::InvalidRanking(format!(
                "chunk {range:?} is outside 0..{total}"
            )));
        }
        Ok(Self {
            current: nth_permutation(d, range.start),
            remaining: range.end - range.start,
        })
    }
}

impl Iterator for PermutationStream {
    type Item = FeatureRanking;

    fn next(&mut self) -> Option<FeatureRanking> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = FeatureRanking::from_permutation_unchecked(self.current.clone());
        if self.remaining > 0 {
            next_permutation(&mut self.current);
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.remaining as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for PermutationStream {}

/// All rankings of `d` features (or one chunk of them) in lexicographic
/// order. Refuses `d > 10`.
pub fn enumerate_rankings(d: usize, chunk: Option<Range<u64>>) -> Result<PermutationStream> {
    PermutationStream::new(d, chunk)
}

/// One line of an explanation export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub input_id: usize,
    pub explainer: String,
    pub seed: u64,
    pub values: AttributionVector,
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[ExplanationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<explanation export>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::model::{LinearProbabilityHead, LinearSoftmaxModel, MlpModel};

    #[test]
    fn small_enumerations() {
        let two: Vec<Vec<usize>> = enumerate_rankings(2, None)
            .unwrap()
            .map(|r| r.order().to_vec())
            .collect();
        assert_eq!(two, vec![vec![0, 1], vec![1, 0]]);
        let three: HashSet<_> = enumerate_rankings(3, None).unwrap().collect();
        assert_eq!(three.len(), 6);
        assert_eq!(enumerate_rankings(1, None).unwrap().count(), 1);
    }

    #[test]
    fn ten_features_is_the_ceiling() {
        assert_eq!(enumerate_rankings(10, None).unwrap().len(), 3_628_800);
        assert!(matches!(
            enumerate_rankings(11, None),
            Err(Error::RefuseExhaustive { features: 11 })
        ));
    }

    #[test]
    fn counts_and_uniqueness() {
        for d in 1..=7 {
            let all: Vec<_> = enumerate_rankings(d, None).unwrap().collect();
            assert_eq!(all.len() as u64, factorial(d));
            let set: HashSet<_> = all.iter().cloned().collect();
            assert_eq!(set.len(), all.len());
            for w in all.windows(2) {
                assert!(w[0].order() < w[1].order(), "not lexicographic");
            }
        }
    }

    #[test]
    fn chunks_partition_the_sequence() {
        let full: Vec<_> = enumerate_rankings(6, None).unwrap().collect();
        for chunks in [1, 2, 7, 100, 720, 1000] {
            let joined: Vec<_> = chunk_ranges(720, chunks)
                .into_iter()
                .flat_map(|r| enumerate_rankings(6, Some(r)).unwrap())
                .collect();
            assert_eq!(joined, full, "{chunks} chunks");
        }
        assert!(enumerate_rankings(3, Some(2..7)).is_err());
        assert_eq!(enumerate_rankings(3, Some(4..4)).unwrap().count(), 0);
    }

    #[test]
    fn unranking_matches_iteration() {
        for (i, r) in enumerate_rankings(5, None).unwrap().enumerate() {
            assert_eq!(nth_permutation(5, i as u64), r.order());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_nested() {
        let a = sample_explanations(5, 10, 3);
        assert_eq!(a, sample_explanations(5, 10, 3));
        assert_eq!(&a[..4], &sample_explanations(5, 4, 3)[..]);
        assert_ne!(a, sample_explanations(5, 10, 4));
        let one = sample_explanations(7, 1, 99);
        assert_eq!(one.len(), 1);
        assert!(one[0].values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn large_samples_have_distinct_rankings() {
        let samples = sample_explanations(50, 10_000, 17);
        let rankings: HashSet<_> = samples.iter().map(|e| e.argsort()).collect();
        assert_eq!(rankings.len(), 10_000);
    }

    #[test]
    fn random_explainer_is_deterministic() {
        let m = MlpModel::new(4, &[3], 2, 0).unwrap();
        let a = explain(ExplainerKind::Random, &m, &[0.0; 4], 0, 8).unwrap();
        assert_eq!(a, explain(ExplainerKind::Random, &m, &[0.0; 4], 0, 8).unwrap());
    }

    #[test]
    fn saliency_of_zero_model_is_zero() {
        let m = MlpModel::zeros(4, &[3], 2).unwrap();
        let e = explain(ExplainerKind::Saliency, &m, &[1.0, 2.0, 3.0, 4.0], 1, 0).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_explainers_on_linear_head() {
        let m = LinearProbabilityHead::single(vec![2.0, -3.0, 0.5]).unwrap();
        let x = [1.0, 2.0, -4.0];
        assert_eq!(saliency(&m, &x, 0).unwrap().values(), &[2.0, 3.0, 0.5]);
        assert_eq!(input_x_gradient(&m, &x, 0).unwrap().values(), &[2.0, -6.0, -2.0]);
        // Constant gradient: IG is exact for any step count.
        let ig = explain(ExplainerKind::IntegratedGradients, &m, &x, 0, 0).unwrap();
        for (a, b) in ig.values().iter().zip([2.0, -6.0, -2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn integrated_gradients_converges_on_linear_softmax() {
        // Class 1 has zero weights, so ∂f_0/∂x = f_0 f_1 w_0 and IG_i is
        // proportional to w_0i x_i.
        let w = vec![0.8, -0.5, 0.3, 1.1];
        let m = LinearSoftmaxModel::new(vec![w.clone(), vec![0.0; 4]], vec![0.0, 0.0]).unwrap();
        let x = [1.5, 0.7, -2.0, 0.9];
        let ig = integrated_gradients(&m, &x, 0, &[0.0; 4], IG_STEPS).unwrap();
        let reference = integrated_gradients(&m, &x, 0, &[0.0; 4], 10_000).unwrap();
        let ratio0 = ig.values()[0] / (w[0] * x[0]);
        for i in 0..4 {
            let rel = (ig.values()[i] - reference.values()[i]).abs() / reference.values()[i].abs();
            assert!(rel < 0.02, "feature {i}: {rel}");
            let ratio = ig.values()[i] / (w[i] * x[i]);
            assert!((ratio - ratio0).abs() < 1e-12 * ratio0.abs());
        }
    }

    #[test]
    fn oracle_linear() {
        let m = LinearSoftmaxModel::new(
            vec![vec![0.4, 3.0, -1.0, 2.0], vec![0.0; 4]],
            vec![0.0, 0.0],
        )
        .unwrap();
        let e = explain(ExplainerKind::OracleLinear, &m, &[1.0; 4], 0, 0).unwrap();
        assert_eq!(e.ranking_descending().order(), &[1, 3, 0, 2]);
        let mlp = MlpModel::new(4, &[], 2, 0).unwrap();
        assert!(matches!(
            explain(ExplainerKind::OracleLinear, &mlp, &[1.0; 4], 0, 0),
            Err(Error::UnsupportedExplainer(_))
        ));
    }

    #[test]
    fn jsonl_export() {
        let rec = ExplanationRecord {
            input_id: 3,
            explainer: "saliency".into(),
            seed: 1,
            values: AttributionVector::new(vec![0.5, 1.0]).unwrap(),
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[rec.clone(), rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"input_id":3,"explainer":"saliency","seed":1,"values":[0.5,1.0]}"#
        );
    }
}
