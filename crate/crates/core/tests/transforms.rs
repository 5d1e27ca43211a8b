//! Public-API checks of the transforms over a full ranking space.

use qge_core::explain::enumerate_rankings;
use qge_core::stats::kendall_tau;
use qge_core::transform::qrand_sweep;
use qge_core::{qge, qrand_k, BaselineKind, EvalContext, MetricKind, MlpModel};

fn setup(d: usize) -> (MlpModel, Vec<f64>) {
    let model = MlpModel::new(d, &[8], 3, 11).unwrap();
    let x = (0..d).map(|i| 1.0 + (i as f64 * 0.7).cos()).collect();
    (model, x)
}

#[test]
fn qge_is_antisymmetric_and_centred_over_all_rankings() {
    let (model, x) = setup(5);
    let ctx = EvalContext::new(&model, &x, 0, &BaselineKind::Zeros);
    let pf = MetricKind::PixelFlipping;
    let mut total = 0.0;
    let mut count = 0;
    for ranking in enumerate_rankings(5, None).unwrap() {
        let e = ranking.to_attribution();
        let g = qge(&pf, &ctx, &e).unwrap();
        let g_inv = qge(&pf, &ctx, &e.inverted()).unwrap();
        assert!((g + g_inv).abs() < 1e-12);
        total += g;
        count += 1;
    }
    assert_eq!(count, 120);
    assert!((total / count as f64).abs() < 1e-12);
}

#[test]
fn qrand_sweep_matches_individual_qrand() {
    let (model, x) = setup(6);
    let ctx = EvalContext::new(&model, &x, 1, &BaselineKind::Zeros);
    let pf = MetricKind::PixelFlipping;
    let e = enumerate_rankings(6, None).unwrap().nth(17).unwrap().to_attribution();
    let (_, sweep) = qrand_sweep(&pf, &ctx, &e, 5, 42).unwrap();
    for (k, value) in (1..=5).zip(&sweep) {
        assert!((qrand_k(&pf, &ctx, &e, k, 42).unwrap() - value).abs() < 1e-12);
    }
}

#[test]
fn reversing_scores_gives_tau_minus_one() {
    let a: Vec<f64> = (0..50).map(|i| (i as f64).sqrt()).collect();
    let b: Vec<f64> = a.iter().map(|v| -v).collect();
    assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
    assert_eq!(kendall_tau(&a, &b).unwrap(), -1.0);
}
