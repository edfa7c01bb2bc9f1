use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;

use diffusion_saddle::engine::{
    adapt_step, centroid, combine_step, disagreement_moments, perturbation_terms, run, NetworkState, RunConfig,
    Scenario, Stepper,
};
use diffusion_saddle::network::{build_combination_matrix, CombinationMatrix, CombinationRule, Topology};
use diffusion_saddle::noise::{DeclaredMoments, NoiseKind, NoiseModel};
use diffusion_saddle::problems::{LogisticNNProblem, Problem, ShiftedProblem};
use diffusion_saddle::rng::agent_stream;

fn composite() -> NoiseModel {
    NoiseModel::new(
        NoiseKind::Composite {
            components: vec![
                NoiseKind::NaturalSampling,
                NoiseKind::Directional { direction: vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2], std: 2f64.sqrt() },
            ],
        },
        DeclaredMoments::default(),
    )
    .unwrap()
}

fn heterogeneous(n: usize, shifts: &[f64]) -> Vec<Arc<dyn Problem>> {
    let base: Arc<dyn Problem> = Arc::new(LogisticNNProblem::new(0.1).unwrap());
    (0..n)
        .map(|k| {
            let c = shifts[k % shifts.len()];
            let b = DMatrix::from_row_slice(2, 2, &[0.2 * c, 0.1, 0.1, -0.3 * c]);
            Arc::new(ShiftedProblem::new(base.clone(), vec![c, -0.5 * c], b).unwrap()) as Arc<dyn Problem>
        })
        .collect()
}

fn random_matrix(n: usize, raw: &[f64]) -> CombinationMatrix {
    let mut a = DMatrix::from_fn(n, n, |i, j| raw[i * n + j] + 0.05);
    for k in 0..n {
        let s: f64 = a.column(k).sum();
        a.column_mut(k).iter_mut().for_each(|v| *v /= s);
    }
    CombinationMatrix::from_entries(a).unwrap()
}

fn complete_scenario(n: usize, noise: NoiseModel) -> Scenario {
    let t = Topology::complete(n, true).unwrap();
    let a = build_combination_matrix(&t, &CombinationRule::Averaging).unwrap();
    Scenario::homogeneous(a, Arc::new(LogisticNNProblem::new(0.1).unwrap()), noise).unwrap()
}

#[test]
fn saddle_trap_holds_exactly() {
    let sc = complete_scenario(3, NoiseModel::natural());
    let mut st = Stepper::new(&sc, 0.01, 99, NetworkState::consensus(3, &[0.0, 0.0]), 1e6).unwrap();
    for _ in 0..2000 {
        st.step().unwrap();
        assert!(st.state().as_slice().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn directional_noise_leaves_the_saddle() {
    let sc = complete_scenario(3, composite());
    let mut st = Stepper::new(&sc, 0.01, 4, NetworkState::consensus(3, &[0.0, 0.0]), 1e6).unwrap();
    let mut left = None;
    for i in 1..=20_000 {
        st.step().unwrap();
        let c = st.centroid();
        if c[0] * c[0] + c[1] * c[1] > 0.01 {
            left = Some(i);
            break;
        }
    }
    assert!(left.is_some());
}

#[test]
fn identical_seeds_give_identical_traces() {
    let sc = complete_scenario(4, composite());
    let mut cfg = RunConfig::new(0.01, 500, 17);
    cfg.record_agents = true;
    let init = NetworkState::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.0], vec![0.5, 0.5], vec![0.0, -1.0]]).unwrap();
    let a = run(&sc, &cfg, init.clone()).unwrap();
    let b = run(&sc, &cfg, init.clone()).unwrap();
    assert_eq!(a, b);
    cfg.seed = 18;
    assert_ne!(run(&sc, &cfg, init).unwrap().trace, a.trace);
}

#[test]
fn agents_cluster_from_scattered_start() {
    let t = Topology::ring(5, true).unwrap();
    let a = build_combination_matrix(&t, &CombinationRule::Metropolis).unwrap();
    let sc = Scenario::homogeneous(a, Arc::new(LogisticNNProblem::new(0.1).unwrap()), NoiseModel::natural()).unwrap();
    let init =
        NetworkState::from_rows(&[vec![1.8, -1.5], vec![-1.2, 1.9], vec![0.5, 1.7], vec![-1.9, -0.4], vec![1.4, 0.6]])
            .unwrap();
    let out = run(&sc, &RunConfig::new(0.02, 2000, 3), init).unwrap();
    let first = &out.trace[0];
    let last = out.trace.last().unwrap();
    assert!(first.disagreement2 > 1.0);
    assert!(last.disagreement2 < 1e-4);
    let c = &last.centroid;
    assert!((c[0].abs() - 1.0614).abs() < 0.1 && c[0] * c[1] > 0.0, "{c:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centroid_recursion_identity(
        raw in prop::collection::vec(0.0f64..1.0, 16),
        rows in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 2), 4),
        shifts in prop::collection::vec(-1.0f64..1.0, 4),
        seed in any::<u64>(),
        mu in 0.001f64..0.05,
    ) {
        let a = random_matrix(4, &raw);
        let problems = heterogeneous(4, &shifts);
        let sc = Scenario::new(a.clone(), problems.clone(), composite()).unwrap();
        let p = sc.perron().to_vec();
        let mut state = NetworkState::from_rows(&rows).unwrap();
        let mut rngs: Vec<_> = (0..4).map(|k| agent_stream(seed, k)).collect();
        for _ in 0..5 {
            let wc = centroid(&state, &p);
            let adapted = adapt_step(&state, &problems, sc.noise(), mu, &mut rngs).unwrap();
            let terms = perturbation_terms(&state, &problems, &p, &adapted.stochastic_grads);
            let next = combine_step(&adapted.phi, &a).unwrap();
            let g = sc.cost().gradient(&wc);
            let lhs = centroid(&next, &p);
            for i in 0..2 {
                let rhs = wc[i] - mu * (g[i] + terms.d[i] + terms.s[i]);
                prop_assert!((lhs[i] - rhs).abs() < 1e-10, "{} vs {}", lhs[i], rhs);
            }
            state = next;
        }
    }

    #[test]
    fn trace_records_are_consistent(seed in any::<u64>(), mu in 0.001f64..0.05) {
        let sc = complete_scenario(3, composite());
        let init = NetworkState::from_rows(&[vec![0.4, -0.2], vec![0.0, 0.3], vec![-0.6, 0.1]]).unwrap();
        let mut cfg = RunConfig::new(mu, 50, seed);
        cfg.record_agents = true;
        let out = run(&sc, &cfg, init).unwrap();
        for r in &out.trace {
            let rows = r.per_agent_iterates.as_ref().unwrap();
            let s = NetworkState::from_rows(rows).unwrap();
            let c = centroid(&s, sc.perron());
            prop_assert!((c[0] - r.centroid[0]).abs() < 1e-12 && (c[1] - r.centroid[1]).abs() < 1e-12);
            prop_assert!(r.disagreement4 >= 0.0 && r.disagreement2 >= 0.0);
            let d = disagreement_moments(&s, sc.perron());
            prop_assert!(d.fourth >= d.second * d.second - 1e-15);
        }
    }

    #[test]
    fn stepper_matches_adapt_then_combine(seed in any::<u64>(), mu in 0.001f64..0.05) {
        let sc = complete_scenario(3, composite());
        let init = NetworkState::from_rows(&[vec![0.4, -0.2], vec![0.0, 0.3], vec![-0.6, 0.1]]).unwrap();
        let mut st = Stepper::new(&sc, mu, seed, init.clone(), 1e6).unwrap();
        let mut rngs: Vec<_> = (0..3).map(|k| agent_stream(seed, k)).collect();
        let mut manual = init;
        for _ in 0..10 {
            st.step().unwrap();
            let ad = adapt_step(&manual, sc.problems(), sc.noise(), mu, &mut rngs).unwrap();
            manual = combine_step(&ad.phi, sc.matrix()).unwrap();
            prop_assert_eq!(st.state().as_slice(), manual.as_slice());
        }
    }
}
