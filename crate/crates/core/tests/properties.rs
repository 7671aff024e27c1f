//! Randomized invariants over small trees.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rtolab::explorer::{build_tree, explore_sentence, explore_token, planted_tree_policy};
use rtolab::optimizers::{gae, redistribute, returns_to_go, RewardVariant};
use rtolab::planner::{evaluate_policy, optimal_value, performance_difference, soft_backward_induction};
use rtolab::policy::AutoregressivePolicy;
use rtolab::stats::sign_test;
use rtolab::{RewardTable, TokenMdp, TreeShape};

fn shape_strategy() -> impl Strategy<Value = TreeShape> {
    (2usize..=3, 1usize..=4, proptest::option::of(0usize..2))
        .prop_map(|(a, h, eos)| TreeShape::new(a, h, 1, eos).unwrap())
}

fn logits(shape: &TreeShape, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-scale..scale, shape.num_nodes())
}

/// MDP with a random edge reward plus two random policies on it.
fn instance() -> impl Strategy<Value = (TokenMdp, AutoregressivePolicy, AutoregressivePolicy, f64)> {
    shape_strategy().prop_flat_map(|shape| {
        (logits(&shape, 1.0), logits(&shape, 2.0), logits(&shape, 2.0), 0.05f64..3.0).prop_map(
            move |(r, a, b, beta)| {
                let reward = RewardTable::from_values(&shape, r).unwrap();
                let mdp = TokenMdp::with_uniform_prompts(shape.clone(), reward).unwrap();
                let reference = AutoregressivePolicy::from_logits(&shape, a).unwrap();
                let other = AutoregressivePolicy::from_logits(&shape, b).unwrap();
                (mdp, reference, other, beta)
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planned_policy_is_normalized_and_optimal((mdp, reference, other, beta) in instance()) {
        let (_, pi) = soft_backward_induction(&mdp, mdp.reward(), &reference, beta).unwrap();
        let shape = mdp.shape();
        for s in shape.decision_nodes() {
            let total: f64 = pi.probs_at(s).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let best = optimal_value(&mdp, mdp.reward(), &reference, beta).unwrap();
        let own = evaluate_policy(&mdp, &pi, mdp.reward(), &reference, beta).unwrap();
        let rival = evaluate_policy(&mdp, &other, mdp.reward(), &reference, beta).unwrap();
        prop_assert!((best - own).abs() < 1e-10);
        prop_assert!(rival <= best + 1e-10);
    }

    #[test]
    fn hard_optimum_dominates((mdp, reference, other, _beta) in instance()) {
        let best = optimal_value(&mdp, mdp.reward(), &reference, 0.0).unwrap();
        let rival = evaluate_policy(&mdp, &other, mdp.reward(), &reference, 0.0).unwrap();
        prop_assert!(rival <= best + 1e-12);
    }

    #[test]
    fn performance_difference_closes((mdp, reference, other, beta) in instance()) {
        let (_, pi) = soft_backward_induction(&mdp, mdp.reward(), &reference, beta).unwrap();
        let (lhs, rhs) = performance_difference(&mdp, &other, &pi, mdp.reward(), &reference, beta).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9);
        prop_assert!(lhs <= 1e-10);
    }

    #[test]
    fn redistribution_keeps_the_sum(
        rewards in proptest::collection::vec(-10.0f64..10.0, 1..12),
        tokens in proptest::collection::vec(0usize..4, 1..12),
        delimiter in 0usize..4,
    ) {
        let len = rewards.len().min(tokens.len());
        for variant in [RewardVariant::SemiRto, RewardVariant::Ddpo] {
            let out = redistribute(variant, &rewards[..len], &tokens[..len], &[delimiter], None).unwrap();
            let before: f64 = rewards[..len].iter().sum();
            let after: f64 = out.iter().sum();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn full_lambda_gae_is_return_minus_baseline(
        rewards in proptest::collection::vec(-5.0f64..5.0, 1..10),
        seed_values in proptest::collection::vec(-5.0f64..5.0, 10),
    ) {
        let mut values = seed_values[..rewards.len()].to_vec();
        values.push(0.0);
        let adv = gae(&rewards, &values, 1.0).unwrap();
        let ret = returns_to_go(&rewards);
        for h in 0..rewards.len() {
            prop_assert!((adv[h] - (ret[h] - values[h])).abs() < 1e-9);
        }
    }

    #[test]
    fn explorers_find_the_heavy_leaf(a in 2usize..=3, h in 1usize..=5, xi in 0.5f64..2.0, seed in any::<u64>()) {
        let pi = planted_tree_policy(a, h, xi, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tree = build_tree(&pi, 0, xi).unwrap();
        let best = tree.best_leaf();
        prop_assert_eq!(explore_token(&tree).leaf, best);
        let sentence = explore_sentence(&tree);
        prop_assert_eq!(sentence.leaf, best);
        prop_assert_eq!(sentence.queries, a.pow(h as u32));
    }

    #[test]
    fn sign_test_p_values_are_probabilities(diffs in proptest::collection::vec(-3i32..=3, 0..40)) {
        let d: Vec<f64> = diffs.iter().map(|&x| x as f64).collect();
        let t = sign_test(&d);
        prop_assert!((0.0..=1.0).contains(&t.p_greater));
        prop_assert!((0.0..=1.0).contains(&t.p_two_sided));
        prop_assert_eq!(t.positive + t.negative, diffs.iter().filter(|&&x| x != 0).count() as u64);
    }
}
