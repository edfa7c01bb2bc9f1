use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;

use diffusion_saddle::problems::{
    estimate_smoothness, BoxRegion, LogisticNNProblem, NetworkCost, Problem, QuadraticProblem, ShiftedProblem,
};
use diffusion_saddle::rng::agent_stream;
use diffusion_saddle::spectral::hessian_split;

// Frozen from an independent NumPy/SciPy evaluation with 200-node Gauss–Hermite.
const MINIMIZER: f64 = 1.06145432;
const LOSS_AT_MINIMUM: f64 = 0.5052938267977227;
const LOSS_AT_TWO_TWO: f64 = 0.8321509256196814;
const MIN_HESSIAN_EIGS: [f64; 2] = [0.19999974, 0.41631393];

fn logistic() -> LogisticNNProblem {
    LogisticNNProblem::new(0.1).unwrap()
}

fn fd_gradient(p: &dyn Problem, w: &[f64], h: f64) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let (mut a, mut b) = (w.to_vec(), w.to_vec());
            a[i] += h;
            b[i] -= h;
            (p.loss(&a) - p.loss(&b)) / (2.0 * h)
        })
        .collect()
}

fn fd_hessian(p: &dyn Problem, w: &[f64], h: f64) -> DMatrix<f64> {
    let m = w.len();
    DMatrix::from_fn(m, m, |i, j| {
        let (mut a, mut b) = (w.to_vec(), w.to_vec());
        a[j] += h;
        b[j] -= h;
        (p.gradient(&a)[i] - p.gradient(&b)[i]) / (2.0 * h)
    })
}

#[test]
fn saddle_values_at_origin() {
    let p = logistic();
    assert_abs_diff_eq!(p.loss(&[0.0, 0.0]), std::f64::consts::LN_2, epsilon = 1e-13);
    assert_eq!(p.gradient(&[0.0, 0.0]), vec![0.0, 0.0]);
    let h = p.hessian(&[0.0, 0.0]);
    let expected = DMatrix::from_row_slice(2, 2, &[0.1, -0.5, -0.5, 0.1]);
    assert!((h - expected).amax() < 1e-8);
}

#[test]
fn minimizer_matches_oracle() {
    let p = logistic();
    let w = [MINIMIZER, MINIMIZER];
    assert_abs_diff_eq!(p.loss(&w), LOSS_AT_MINIMUM, epsilon = 1e-10);
    let g = p.gradient(&w);
    assert!(g.iter().all(|x| x.abs() < 1e-7), "{g:?}");
    let s = hessian_split(&p.hessian(&w)).unwrap();
    assert_eq!(s.lambda_neg.len(), 0);
    let mut eig: Vec<f64> = s.lambda_nonneg.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    assert_abs_diff_eq!(eig[0], MIN_HESSIAN_EIGS[0], epsilon = 1e-6);
    assert_abs_diff_eq!(eig[1], MIN_HESSIAN_EIGS[1], epsilon = 1e-6);
    assert_abs_diff_eq!(p.loss(&[-MINIMIZER, -MINIMIZER]), LOSS_AT_MINIMUM, epsilon = 1e-10);
    assert_abs_diff_eq!(p.loss(&[2.0, 2.0]), LOSS_AT_TWO_TWO, epsilon = 1e-10);
}

#[test]
fn quadrature_resolution_is_converged() {
    let coarse = LogisticNNProblem::with_nodes(0.1, 100).unwrap();
    let fine = logistic();
    for w in [[0.3, -0.7], [1.5, 1.2], [-2.0, 0.4]] {
        assert_abs_diff_eq!(coarse.loss(&w), fine.loss(&w), epsilon = 1e-12);
    }
}

#[test]
fn natural_sample_mean_is_the_gradient() {
    let p = logistic();
    let w = [0.7, -0.4];
    let n = 200_000;
    let mut rng = agent_stream(42, 0);
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    let mut g = [0.0; 2];
    for _ in 0..n {
        p.sample_gradient_into(&w, &mut rng, &mut g).unwrap();
        for i in 0..2 {
            sum[i] += g[i];
            sq[i] += g[i] * g[i];
        }
    }
    let exact = p.gradient(&w);
    for i in 0..2 {
        let mean = sum[i] / n as f64;
        let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact[i]).abs() < 5.0 * se, "component {i}: {mean} vs {}", exact[i]);
    }
}

#[test]
fn smoothness_of_quadratic_is_its_spectral_norm() {
    let q = QuadraticProblem::diagonal(&[2.0, -0.5]).unwrap();
    let est = estimate_smoothness(&q, &BoxRegion::symmetric(2, 3.0).unwrap(), 50, 1).unwrap();
    assert!(est.delta_hat <= 2.0 + 1e-12 && est.delta_hat > 1.9);
    assert_eq!(est.rho_hat, 0.0);
}

#[test]
fn logistic_smoothness_on_box() {
    let est = estimate_smoothness(&logistic(), &BoxRegion::symmetric(2, 2.0).unwrap(), 200, 3).unwrap();
    assert!(est.delta_hat > 0.5 && est.delta_hat < 3.0, "{est:?}");
    assert!(est.rho_hat > 0.0);
}

#[test]
fn shifted_cost_with_balanced_shifts_keeps_the_saddle() {
    let base: Arc<dyn Problem> = Arc::new(logistic());
    let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.3, -0.3]));
    let agents: Vec<Arc<dyn Problem>> = vec![
        Arc::new(ShiftedProblem::new(base.clone(), vec![1.0, -1.0], b.clone()).unwrap()),
        Arc::new(ShiftedProblem::new(base.clone(), vec![0.0, 0.0], DMatrix::zeros(2, 2)).unwrap()),
        Arc::new(ShiftedProblem::new(base.clone(), vec![-1.0, 1.0], -b).unwrap()),
    ];
    let cost = NetworkCost::new(agents, vec![2.0 / 7.0, 3.0 / 7.0, 2.0 / 7.0]).unwrap();
    for w in [[0.0, 0.0], [0.4, -1.1]] {
        assert_abs_diff_eq!(cost.loss(&w), base.loss(&w), epsilon = 1e-14);
        assert!((cost.hessian(&w) - base.hessian(&w)).amax() < 1e-14);
    }
}

proptest! {
    #[test]
    fn logistic_gradient_matches_finite_differences(a in -2.5f64..2.5, b in -2.5f64..2.5) {
        let p = logistic();
        let w = [a, b];
        let fd = fd_gradient(&p, &w, 1e-6);
        let g = p.gradient(&w);
        for i in 0..2 {
            prop_assert!((fd[i] - g[i]).abs() < 1e-7, "{:?} vs {:?}", fd, g);
        }
    }

    #[test]
    fn logistic_hessian_matches_finite_differences(a in -2.5f64..2.5, b in -2.5f64..2.5) {
        let p = logistic();
        let w = [a, b];
        let h = p.hessian(&w);
        prop_assert!((fd_hessian(&p, &w, 1e-6) - &h).amax() < 1e-7);
        prop_assert!((&h - h.transpose()).amax() == 0.0);
    }

    #[test]
    fn logistic_loss_is_sign_symmetric(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = logistic();
        prop_assert!((p.loss(&[a, b]) - p.loss(&[-a, -b])).abs() < 1e-14);
        prop_assert!((p.loss(&[a, b]) - p.loss(&[b, a])).abs() < 1e-14);
    }

    #[test]
    fn shifted_gradient_matches_finite_differences(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -1.0f64..1.0) {
        let base: Arc<dyn Problem> = Arc::new(logistic());
        let bm = DMatrix::from_row_slice(2, 2, &[c, 0.2, 0.2, -c]);
        let s = ShiftedProblem::new(base, vec![c, 1.0 - c], bm).unwrap();
        let w = [a, b];
        let fd = fd_gradient(&s, &w, 1e-6);
        let g = s.gradient(&w);
        prop_assert!((fd[0] - g[0]).abs() < 1e-7 && (fd[1] - g[1]).abs() < 1e-7);
    }
}
