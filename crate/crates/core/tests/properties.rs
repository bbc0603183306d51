mod common;

use common::*;
use llirl::envmodel::{self, ModelMode};
use llirl::envs::{NavConfig, NavSettings};
use llirl::mixture::{posterior_from_log_likelihoods, EmSettings};
use llirl::policy::{self, GaussianPolicy};
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// Valid library states: masses are soft counts summing to `t − 1`.
fn library_state() -> impl Strategy<Value = (Vec<f64>, usize, f64)> {
    (1usize..10, 1usize..300, prop_oneof![Just(0.0), 0.0..50.0f64, Just(1e9)]).prop_flat_map(|(l, t, zeta)| {
        (prop::collection::vec(0.0..1.0f64, l), Just(t), Just(zeta)).prop_map(|(w, t, zeta)| {
            let total: f64 = w.iter().sum();
            let masses = if t == 1 || total == 0.0 {
                vec![0.0; w.len()]
            } else {
                w.iter().map(|v| v / total * (t - 1) as f64).collect()
            };
            (masses, t, zeta)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn crp_prior_sums_to_one((masses, t, zeta) in library_state()) {
        prop_assume!(t > 1 || zeta >= 0.0);
        let prior = library(&masses, t, zeta).crp_prior();
        prop_assert_eq!(prior.len(), masses.len() + 1);
        prop_assert!(prior.iter().all(|p| *p >= 0.0));
        prop_assert!((prior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn posterior_matches_linear_space_oracle(
        terms in prop::collection::vec((-30.0..0.0f64, 0.01..1.0f64), 1..12)
    ) {
        let lls: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let total: f64 = terms.iter().map(|t| t.1).sum();
        let prior: Vec<f64> = terms.iter().map(|t| t.1 / total).collect();
        let post = posterior_from_log_likelihoods(&lls, &prior).unwrap();
        let joint: Vec<f64> = lls.iter().zip(&prior).map(|(ll, p)| p * ll.exp()).collect();
        let z: f64 = joint.iter().sum();
        for (p, j) in post.probs.iter().zip(&joint) {
            prop_assert!((p - j / z).abs() < 1e-9);
        }
        prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_survives_underflow(shift in 1e3..1e6f64, lls in prop::collection::vec(-50.0..0.0f64, 2..6)) {
        let shifted: Vec<f64> = lls.iter().map(|v| v - shift).collect();
        let prior = vec![1.0 / lls.len() as f64; lls.len()];
        let a = posterior_from_log_likelihoods(&lls, &prior).unwrap();
        let b = posterior_from_log_likelihoods(&shifted, &prior).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn log_likelihood_ignores_sample_order(seed in 0u64..1000) {
        let mut r = rng(seed);
        let model = tiny_model(seed);
        let data = random_dataset(ModelMode::Reward, 4, 20, &mut r);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut r);
        let a = envmodel::log_likelihood(&model, &data).unwrap();
        let b = envmodel::log_likelihood(&model, &data.permuted(&order)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn em_never_lowers_a_cluster_below_its_snapshot(seed in 0u64..1000, clusters in 1usize..4, expanded in any::<bool>()) {
        let mut r = rng(seed);
        let t = clusters + 1;
        // a just-expanded last cluster has no mass yet
        let holders = if expanded && clusters > 1 { clusters - 1 } else { clusters };
        let mut masses = vec![0.0; clusters];
        masses[..holders].fill((t - 1) as f64 / holders as f64);
        let mut lib = library(&masses, t, 1.0);
        let data = random_dataset(ModelMode::Reward, 4, 30, &mut r);
        let before = lib.log_likelihoods(&data).unwrap();
        let settings = EmSettings { lr: 0.05, inner_steps: 10, ..EmSettings::default() };
        let report = lib.em_update(&data, expanded, &settings).unwrap();
        let after = lib.log_likelihoods(&data).unwrap();
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a >= b, "{} < {}", a, b);
        }
        prop_assert!(report.iterations <= settings.max_iterations);
        prop_assert!((report.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    /// Shifting every reward by a constant leaves the policy gradient unchanged.
    #[test]
    fn policy_gradient_is_baseline_invariant(seed in 0u64..1000, shift in -5.0..5.0f64) {
        let policy = GaussianPolicy::new(&mut rng(seed));
        let settings = NavSettings { horizon: 15, goal_tolerance: 1e-12, ..NavSettings::default() };
        let cfg = NavConfig::goal_only([0.9, 0.7]);
        let batch = policy::collect_batch(&policy, &cfg, &settings, 4, 0.99, &mut rng(seed + 1)).unwrap();
        let mut shifted = batch.clone();
        for ep in &mut shifted.episodes {
            for tr in &mut ep.transitions {
                tr.r += shift;
            }
        }
        let g0 = policy::reinforce_gradient(&policy, &batch).unwrap();
        let g1 = policy::reinforce_gradient(&policy, &shifted).unwrap();
        let scale = g0.net.norm().max(1e-12);
        let mut diff = g0.net.clone();
        diff.add_scaled(&g1.net, -1.0).unwrap();
        prop_assert!(diff.norm() / scale < 1e-8, "relative change {}", diff.norm() / scale);
        for d in 0..2 {
            prop_assert!((g0.log_std[d] - g1.log_std[d]).abs() <= 1e-8 * g0.log_std[d].abs().max(1e-12));
        }
    }
}

/// With a vanishing step the models stay put, so the second E-step repeats
/// the first exactly and EM stops after one M-step.
#[test]
fn e_step_is_idempotent_at_a_fixed_point() {
    let mut lib = library(&[1.5, 0.5, 1.0], 4, 1.0);
    let data = random_dataset(ModelMode::Reward, 4, 25, &mut rng(5));
    let before: Vec<_> = lib.clusters.iter().map(|c| c.model.net.clone()).collect();
    let report = lib
        .em_update(&data, false, &EmSettings { lr: 1e-300, ..EmSettings::default() })
        .unwrap();
    let after: Vec<_> = lib.clusters.iter().map(|c| c.model.net.clone()).collect();
    assert_eq!(before, after);
    assert_eq!(report.iterations, 1);
    assert!(report.converged);
    assert_eq!(report.last_change, 0.0);
}
