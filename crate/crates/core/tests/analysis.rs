use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;

use diffusion_saddle::analysis::{
    classify, descent_experiment, escape_time_bound, hessian_split, second_order_iteration_bound, Constants,
    DescentRegion, SetKind,
};
use diffusion_saddle::engine::Scenario;
use diffusion_saddle::network::{build_combination_matrix, CombinationRule, Topology};
use diffusion_saddle::noise::NoiseModel;
use diffusion_saddle::problems::{BoxRegion, LogisticNNProblem, QuadraticProblem};

fn symmetric(raw: &[f64], n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(n, n, raw);
    (&a + a.transpose()) * 0.5
}

fn matrix(n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (Just(n), prop::collection::vec(-3.0f64..3.0, n * n))
}

#[test]
fn escape_bound_is_monotone_on_a_grid() {
    let sig = [0.25, 0.5, 1.0, 2.0, 4.0];
    let taus = [0.05, 0.1, 0.2, 0.4];
    for &mu in &[0.001, 0.01, 0.05] {
        for m in 1..=4 {
            for &su in &sig {
                for &sl in &sig {
                    for &tau in &taus {
                        let b = escape_time_bound(m, su, sl, mu, tau).unwrap();
                        assert!(b >= 1);
                        assert!(escape_time_bound(m + 1, su, sl, mu, tau).unwrap() >= b);
                        assert!(escape_time_bound(m, su * 2.0, sl, mu, tau).unwrap() >= b);
                        assert!(escape_time_bound(m, su, sl * 2.0, mu, tau).unwrap() <= b);
                        assert!(escape_time_bound(m, su, sl, mu, tau * 2.0).unwrap() <= b);
                    }
                }
            }
        }
    }
}

#[test]
fn escape_bound_scales_like_inverse_step() {
    let a = escape_time_bound(2, 1.0, 1.0, 0.001, 0.4).unwrap() as f64;
    let b = escape_time_bound(2, 1.0, 1.0, 0.0005, 0.4).unwrap() as f64;
    assert!((b / a - 2.0).abs() < 0.01);
}

#[test]
fn second_order_bound_is_linear_in_inverse_confidence() {
    let a = second_order_iteration_bound(1.0, 0.0, 0.01, 0.5, 0.1, 202).unwrap();
    let b = second_order_iteration_bound(1.0, 0.0, 0.01, 0.5, 0.2, 202).unwrap();
    assert_eq!(a, 2 * b);
}

#[test]
fn descent_in_h_is_positive() {
    let t = Topology::complete(3, true).unwrap();
    let a = build_combination_matrix(&t, &CombinationRule::Averaging).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let noise = NoiseModel::directional(vec![r, r], 2f64.sqrt()).unwrap();
    let sc = Scenario::homogeneous(a, Arc::new(LogisticNNProblem::new(0.1).unwrap()), noise).unwrap();
    let c = Constants::new(0.01, 1.0, 1.0, 0.5, 0.4, 1.0, 1.0).unwrap();
    let res =
        descent_experiment(DescentRegion::H, &sc, &c, &BoxRegion::symmetric(2, 0.2).unwrap(), 60, 5, 100_000, 1e6)
            .unwrap();
    assert_eq!(res.iterations, 202);
    assert!(res.mean > 0.0);
}

#[test]
fn descent_rejects_empty_region() {
    let t = Topology::complete(1, true).unwrap();
    let a = build_combination_matrix(&t, &CombinationRule::Averaging).unwrap();
    let q = QuadraticProblem::diagonal(&[1.0, 1.0]).unwrap();
    let sc = Scenario::homogeneous(a, Arc::new(q), NoiseModel::zero()).unwrap();
    let c = Constants::new(0.01, 1.0, 1.0, 0.5, 0.1, 1.0, 1.0).unwrap();
    // a convex quadratic has no H points
    assert!(
        descent_experiment(DescentRegion::H, &sc, &c, &BoxRegion::symmetric(2, 1.0).unwrap(), 1, 0, 1000, 1e6).is_err()
    );
}

proptest! {
    #[test]
    fn hessian_split_reconstructs((n, raw) in (1usize..6).prop_flat_map(matrix)) {
        let h = symmetric(&raw, n);
        let s = hessian_split(&h).unwrap();
        prop_assert!((s.reconstruct() - &h).amax() < 1e-10);
        let proj = s.negative_projector();
        prop_assert!((&proj * &proj - &proj).amax() < 1e-10);
        let v = DMatrix::from_columns(
            &s.v_nonneg.column_iter().chain(s.v_neg.column_iter()).map(|c| c.into_owned()).collect::<Vec<_>>(),
        );
        prop_assert!((v.transpose() * &v - DMatrix::identity(n, n)).amax() < 1e-10);
        prop_assert!(s.lambda_nonneg.iter().all(|&l| l >= -1e-10));
        prop_assert!(s.lambda_neg.iter().all(|&l| l < 0.0));
    }

    #[test]
    fn classify_is_exhaustive_and_follows_thresholds(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        mu in 0.0005f64..0.2,
        pi in 0.05f64..0.95,
        tau in 0.01f64..1.0,
    ) {
        let p = LogisticNNProblem::new(0.1).unwrap();
        let c = Constants::new(mu, 1.0, 1.0, pi, tau, 1.0, 1.0).unwrap();
        let l = classify(&[a, b], &p, &c);
        let expected = if l.grad_norm2 >= c.gradient_threshold() {
            SetKind::G
        } else if l.lambda_min <= -tau + 1e-10 {
            SetKind::H
        } else {
            SetKind::M
        };
        prop_assert_eq!(l.kind, expected);
    }

    #[test]
    fn quadratic_descent_in_g_matches_closed_form(d0 in 0.5f64..2.0, d1 in -0.5f64..2.0, mu in 0.001f64..0.05) {
        let t = Topology::complete(1, true).unwrap();
        let a = build_combination_matrix(&t, &CombinationRule::Averaging).unwrap();
        let q = QuadraticProblem::diagonal(&[d0, d1]).unwrap();
        let sc = Scenario::homogeneous(a, Arc::new(q), NoiseModel::zero()).unwrap();
        let c = Constants::new(mu, 2.0, 1.0, 0.5, 0.1, 1.0, 1.0).unwrap();
        let res = descent_experiment(DescentRegion::G, &sc, &c, &BoxRegion::symmetric(2, 3.0).unwrap(), 5, 1, 100_000, 1e6).unwrap();
        for (w, dj) in res.start_points.iter().zip(&res.deltas) {
            let j = |x: f64, y: f64| 0.5 * (d0 * x * x + d1 * y * y);
            let exact = j(w[0], w[1]) - j(w[0] * (1.0 - mu * d0), w[1] * (1.0 - mu * d1));
            prop_assert!((dj - exact).abs() < 1e-12 * exact.abs().max(1.0));
        }
    }
}
