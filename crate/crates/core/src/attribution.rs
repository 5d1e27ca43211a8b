//! Attribution vectors, feature rankings and the ranking primitives every
//! other module builds on.
//!
//! Rankings are *ascending*: `argsort()[0]` is the least-attributed feature.
//! Ties are broken by ascending feature index, so every ranking (and every
//! quality score derived from one) is deterministic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature importance scores for one prediction.
///
/// Always non-empty and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AttributionVector(Vec<f64>);

impl AttributionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidAttribution("attribution vector is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidAttribution(format!(
                "entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    /// Indices in ascending attribution order, ties by ascending index.
    pub fn argsort(&self) -> FeatureRanking {
        FeatureRanking(stable_order(&self.0))
    }

    /// Indices in descending attribution order; element 0 is the most
    /// attributed feature.
    pub fn ranking_descending(&self) -> FeatureRanking {
        let mut order = stable_order(&self.0);
        order.reverse();
        FeatureRanking(order)
    }

    /// The inverse explanation: the same multiset of values, reassigned so the
    /// feature ranking is reversed.
    ///
    /// With `o = argsort(e)`, the result satisfies `inv[o[i]] = e[o[D-1-i]]`.
    /// Features tied in `e` stay tied in the result, so the reversal of the
    /// ranking is exact only for tie-free vectors.
    pub fn inverted(&self) -> AttributionVector {
        let order = stable_order(&self.0);
        let d = order.len();
        let mut out = vec![0.0; d];
        for (i, &feature) in order.iter().enumerate() {
            out[feature] = self.0[order[d - 1 - i]];
        }
        AttributionVector(out)
    }

    /// Elementwise negation. Reverses the ranking of tie-free vectors but does
    /// not preserve magnitudes or bounds of the original values.
    pub fn negated(&self) -> AttributionVector {
        AttributionVector(self.0.iter().map(|v| -v).collect())
    }
}

impl TryFrom<Vec<f64>> for AttributionVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<AttributionVector> for Vec<f64> {
    fn from(v: AttributionVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for AttributionVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

// Values are finite by construction, so partial_cmp never fails; it also
// treats -0.0 and 0.0 as a tie, which total_cmp would not.
fn stable_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// A permutation of feature indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FeatureRanking(Vec<usize>);

impl FeatureRanking {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let d = order.len();
        if d == 0 {
            return Err(Error::InvalidRanking("ranking is empty".into()));
        }
        let mut seen = vec![false; d];
        for &i in &order {
            if i >= d || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidRanking(format!(
                    "{order:?} is not a permutation of 0..{d}"
                )));
            }
        }
        Ok(Self(order))
    }

    /// Caller guarantees `order` is a permutation of `0..order.len()`.
    pub(crate) fn from_permutation_unchecked(order: Vec<usize>) -> Self {
        debug_assert!(Self::new(order.clone()).is_ok());
        Self(order)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn reversed(&self) -> FeatureRanking {
        let mut order = self.0.clone();
        order.reverse();
        FeatureRanking(order)
    }

    /// Materializes the ranking as an attribution vector whose value for each
    /// feature is its ascending rank position, so `argsort` returns `self`.
    pub fn to_attribution(&self) -> AttributionVector {
        let mut values = vec![0.0; self.0.len()];
        for (rank, &feature) in self.0.iter().enumerate() {
            values[feature] = rank as f64;
        }
        AttributionVector(values)
    }
}

impl TryFrom<Vec<usize>> for FeatureRanking {
    type Error = Error;

    fn try_from(order: Vec<usize>) -> Result<Self> {
        Self::new(order)
    }
}

impl From<FeatureRanking> for Vec<usize> {
    fn from(r: FeatureRanking) -> Self {
        r.0
    }
}

/// `argsort` over raw values, validating finiteness.
pub fn argsort_stable(values: &[f64]) -> Result<FeatureRanking> {
    Ok(AttributionVector::new(values.to_vec())?.argsort())
}

pub fn ranking_descending(values: &[f64]) -> Result<FeatureRanking> {
    Ok(AttributionVector::new(values.to_vec())?.ranking_descending())
}

pub fn invert_explanation(values: &[f64]) -> Result<AttributionVector> {
    Ok(AttributionVector::new(values.to_vec())?.inverted())
}

pub fn negate_explanation(values: &[f64]) -> Result<AttributionVector> {
    Ok(AttributionVector::new(values.to_vec())?.negated())
}

/// One input to the model, optionally labelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Instance {
    pub fn new(features: Vec<f64>, label: Option<usize>) -> Self {
        Self { features, label }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Binary mask marking the features that belong to the labelled region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct GroundTruthMask(Vec<bool>);

impl GroundTruthMask {
    pub fn new(inside: Vec<bool>) -> Result<Self> {
        let count = inside.iter().filter(|&&b| b).count();
        if count == 0 || count == inside.len() {
            return Err(Error::DegenerateMask);
        }
        Ok(Self(inside))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn inside(&self) -> &[bool] {
        &self.0
    }

    #[inline]
    pub fn contains(&self, feature: usize) -> bool {
        self.0[feature]
    }

    /// Number of features inside the region.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl TryFrom<Vec<u8>> for GroundTruthMask {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidAttribution("mask entries must be 0 or 1".into()));
        }
        Self::new(bits.into_iter().map(|b| b == 1).collect())
    }
}

impl From<GroundTruthMask> for Vec<u8> {
    fn from(m: GroundTruthMask) -> Self {
        m.0.into_iter().map(u8::from).collect()
    }
}

/// Maps raw features to superpixel groups that are perturbed as one unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrouping {
    group_of: Vec<usize>,
    groups: usize,
}

impl FeatureGrouping {
    pub fn new(group_of: Vec<usize>) -> Result<Self> {
        if group_of.is_empty() {
            return Err(Error::InvalidGrouping("grouping is empty".into()));
        }
        let groups = group_of.iter().max().map_or(0, |&m| m + 1);
        let mut used = vec![false; groups];
        for &g in &group_of {
            used[g] = true;
        }
        if let Some(g) = used.iter().position(|&u| !u) {
            return Err(Error::InvalidGrouping(format!("group {g} has no members")));
        }
        Ok(Self { group_of, groups })
    }

    /// Square `block`×`block` superpixels over a row-major `height`×`width`
    /// grid. Edge blocks are truncated when the grid is not a multiple of
    /// `block`.
    pub fn grid(height: usize, width: usize, block: usize) -> Result<Self> {
        if block == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidGrouping("grid and block sizes must be positive".into()));
        }
        let blocks_w = width.div_ceil(block);
        let group_of = (0..height * width)
            .map(|i| (i / width / block) * blocks_w + (i % width) / block)
            .collect();
        Self::new(group_of)
    }

    #[inline]
    pub fn group_count(&self) -> usize {
        self.groups
    }

    #[inline]
    pub fn feature_count(&self) -> usize {
        self.group_of.len()
    }

    #[inline]
    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    /// Sums raw per-feature attributions into one attribution per group.
    pub fn aggregate(&self, raw: &[f64]) -> Result<AttributionVector> {
        if raw.len() != self.group_of.len() {
            return Err(Error::shape(self.group_of.len(), raw.len(), "raw attribution"));
        }
        let mut sums = vec![0.0; self.groups];
        for (&g, &v) in self.group_of.iter().zip(raw) {
            sums[g] += v;
        }
        AttributionVector::new(sums)
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.groups];
        for (i, &g) in self.group_of.iter().enumerate() {
            members[g].push(i);
        }
        members
    }
}

/// Scalar output of a quality measure.
///
/// `degenerate` marks correlation-style scores that were undefined (a series
/// with zero variance) and have been reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl QualityScore {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    pub fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn av(v: &[f64]) -> AttributionVector {
        AttributionVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn argsort_worked_example() {
        let e = av(&[0.1, -0.1, 9.0, 4.0]);
        assert_eq!(e.argsort().order(), &[1, 0, 3, 2]);
        assert_eq!(e.ranking_descending().order(), &[2, 3, 0, 1]);
        assert_eq!(av(&[5.0]).argsort().order(), &[0]);
        assert_eq!(av(&[2.0, 2.0, 1.0]).argsort().order(), &[2, 0, 1]);
        assert_eq!(av(&[1.0, 1.0]).ranking_descending().order(), &[1, 0]);
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(av(&[0.0, -0.0]).argsort().order(), &[0, 1]);
    }

    #[test]
    fn inverse_worked_example() {
        let inv = av(&[0.1, -0.1, 9.0, 4.0]).inverted();
        assert_eq!(inv.values(), &[4.0, 9.0, -0.1, 0.1]);
        assert_eq!(inv.argsort().order(), &[2, 3, 0, 1]);
        assert_eq!(av(&[7.0]).inverted().values(), &[7.0]);
        assert_eq!(av(&[1.0, 2.0, 3.0]).inverted().values(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn negation() {
        assert_eq!(
            av(&[0.1, -0.1, 9.0, 4.0]).negated().values(),
            &[-0.1, 0.1, -9.0, -4.0]
        );
        assert_eq!(av(&[0.0, 0.0]).negated().values(), &[0.0, 0.0]);
        let neg = av(&[1.0, 2.0]).negated();
        assert_eq!(neg.values(), &[-1.0, -2.0]);
        assert_eq!(neg.argsort().order(), &[1, 0]);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            argsort_stable(&[1.0, f64::NAN]),
            Err(Error::InvalidAttribution(_))
        ));
        assert!(invert_explanation(&[f64::INFINITY]).is_err());
        assert!(negate_explanation(&[]).is_err());
        assert!(ranking_descending(&[0.0, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn ranking_validation() {
        assert!(FeatureRanking::new(vec![1, 0, 2]).is_ok());
        assert!(FeatureRanking::new(vec![0, 0, 2]).is_err());
        assert!(FeatureRanking::new(vec![0, 3, 1]).is_err());
        assert!(FeatureRanking::new(vec![]).is_err());
    }

    #[test]
    fn ranking_materializes_as_rank_positions() {
        let r = FeatureRanking::new(vec![2, 0, 1]).unwrap();
        let e = r.to_attribution();
        assert_eq!(e.values(), &[1.0, 2.0, 0.0]);
        assert_eq!(e.argsort(), r);
    }

    #[test]
    fn json_shapes() {
        let e = av(&[0.5, -1.0]);
        assert_eq!(serde_json::to_string(&e).unwrap(), "[0.5,-1.0]");
        assert_eq!(serde_json::to_string(&e.argsort()).unwrap(), "[1,0]");
        assert!(serde_json::from_str::<FeatureRanking>("[0,0]").is_err());
        assert!(serde_json::from_str::<AttributionVector>("[]").is_err());
        let m: GroundTruthMask = serde_json::from_str("[0,1,1]").unwrap();
        assert_eq!(m.count(), 2);
    }

    #[test]
    fn mask_needs_both_classes() {
        assert!(matches!(
            GroundTruthMask::new(vec![true, true]),
            Err(Error::DegenerateMask)
        ));
        assert!(GroundTruthMask::new(vec![false, false]).is_err());
    }

    #[test]
    fn grid_grouping() {
        let g = FeatureGrouping::grid(4, 4, 2).unwrap();
        assert_eq!(g.group_count(), 4);
        assert_eq!(
            g.group_of(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
        let g = FeatureGrouping::grid(3, 3, 2).unwrap();
        assert_eq!(g.group_count(), 4);
        assert_eq!(g.members()[3], vec![8]);
        assert!(FeatureGrouping::new(vec![0, 2]).is_err());
        let agg = FeatureGrouping::new(vec![1, 0, 1]).unwrap().aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(agg.values(), &[2.0, 4.0]);
    }

    fn tie_free() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::hash_set(-1_000_000i64..1_000_000, 1..40)
            .prop_map(|s| s.into_iter().map(|v| v as f64 / 1000.0).collect())
    }

    proptest! {
        #[test]
        fn inversion_reverses_ranking(values in tie_free()) {
            let e = av(&values);
            prop_assert_eq!(e.inverted().argsort(), e.argsort().reversed());
            prop_assert_eq!(e.negated().argsort(), e.argsort().reversed());
            prop_assert_eq!(e.inverted().inverted().argsort(), e.argsort());
        }

        #[test]
        fn inversion_preserves_values(values in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let e = av(&values);
            let mut a = e.values().to_vec();
            let mut b = e.inverted().into_values();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn argsort_is_a_sorted_permutation(values in prop::collection::vec(-3i32..3, 1..30)) {
            let e = av(&values.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let o = e.argsort();
            prop_assert!(FeatureRanking::new(o.order().to_vec()).is_ok());
            for w in o.order().windows(2) {
                let (a, b) = (e.values()[w[0]], e.values()[w[1]]);
                prop_assert!(a < b || (a == b && w[0] < w[1]));
            }
        }
    }
}
