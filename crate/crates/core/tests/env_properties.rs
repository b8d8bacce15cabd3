use ppt_core::env::{
    bradley_terry, context_scale, preference_prob, reward, sample_context, sample_mixed_user, sample_preference, ActionId, Context,
    EnvSpec, UserProfile,
};
use ppt_core::numcore::Rng;
use proptest::prelude::*;

fn ctx(v: &[f64]) -> Context {
    Context::new(v.to_vec()).unwrap()
}

#[test]
fn hand_computed_rewards() {
    let spec = EnvSpec::default();
    // Four encoder rows of 1/6 each: s(x) = (4/6)·Σx = (2/3)·1.8 = 1.2.
    let x = ctx(&[0.3, 0.6, 0.9]);
    assert!((context_scale(&spec, &x) - 1.2).abs() < 1e-12);
    let g1 = UserProfile::pure(0, 3);
    assert!((reward(&spec, &g1, ActionId(0), &x, 0.0) - 8.4).abs() < 1e-12);
    assert!((reward(&spec, &g1, ActionId(3), &x, 0.0) - 1.2).abs() < 1e-12);
    // 0.5·5 + 0.25·7 + 0.25·1 = 4.5.
    let mixed = UserProfile::new(vec![0.5, 0.25, 0.25]).unwrap();
    assert!((reward(&spec, &mixed, ActionId(1), &x, 0.0) - 5.4).abs() < 1e-12);
    // Noise is added as given.
    assert!((reward(&spec, &g1, ActionId(0), &x, 0.25) - 8.65).abs() < 1e-12);
}

#[test]
fn best_actions_of_pure_groups() {
    let spec = EnvSpec::default();
    for g in 0..3 {
        assert_eq!(spec.best_action(&UserProfile::pure(g, 3)), ActionId(g));
    }
}

#[test]
fn bradley_terry_reference_values() {
    // σ(2) and σ(6).
    assert!((bradley_terry(2.0, 0.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
    assert!((bradley_terry(7.0, 1.0) - 0.997_527_376_843_365_2).abs() < 1e-15);
    assert_eq!(bradley_terry(3.0, 3.0), 0.5);
}

#[test]
fn winner_frequency_at_gap_two() {
    let spec = EnvSpec {
        noise_sigma: 0.0,
        ..EnvSpec::default()
    };
    let x = ctx(&[0.5, 0.5, 0.5]);
    assert!((context_scale(&spec, &x) - 1.0).abs() < 1e-12);
    let user = UserProfile::pure(0, 3);
    let mut rng = Rng::new(11);
    let n = 20_000;
    let wins = (0..n)
        .filter(|_| sample_preference(&mut rng, &spec, &user, ActionId(1), ActionId(2), &x).unwrap().0 == ActionId(1))
        .count();
    let freq = wins as f64 / n as f64;
    assert!((freq - 0.8808).abs() <= 0.010, "frequency {freq}");
}

#[test]
fn noise_free_samples_follow_the_probability() {
    let spec = EnvSpec {
        noise_sigma: 0.0,
        ..EnvSpec::default()
    };
    let mut rng = Rng::new(12);
    let user = UserProfile::new(vec![0.2, 0.3, 0.5]).unwrap();
    let x = ctx(&[0.1, 0.2, 0.3]);
    let p = preference_prob(&spec, &user, ActionId(2), ActionId(0), &x).unwrap();
    let n = 40_000;
    let wins = (0..n)
        .filter(|_| sample_preference(&mut rng, &spec, &user, ActionId(2), ActionId(0), &x).unwrap().0 == ActionId(2))
        .count();
    // Four standard errors.
    let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
    assert!((wins as f64 / n as f64 - p).abs() < tol);
}

#[test]
fn same_action_pair_rejected() {
    let spec = EnvSpec::default();
    let mut rng = Rng::new(1);
    let x = ctx(&[0.5, 0.5, 0.5]);
    assert!(sample_preference(&mut rng, &spec, &UserProfile::pure(0, 3), ActionId(1), ActionId(1), &x).is_err());
    assert!(preference_prob(&spec, &UserProfile::pure(0, 3), ActionId(0), ActionId(9), &x).is_err());
}

#[test]
fn invalid_inputs_rejected() {
    assert!(Context::new(vec![0.5, 1.5, 0.0]).is_err());
    assert!(UserProfile::new(vec![0.5, 0.6, 0.0]).is_err());
    assert!(UserProfile::new(vec![-0.1, 0.6, 0.5]).is_err());
    let mut spec = EnvSpec::default();
    spec.noise_sigma = -1.0;
    assert!(spec.validate().is_err());
    let mut spec = EnvSpec::default();
    spec.reward_table[2] = spec.reward_table[0].clone();
    assert!(spec.validate().is_err());
}

proptest! {
    #[test]
    fn preference_is_antisymmetric(
        x in prop::collection::vec(0.0f64..=1.0, 3),
        w in prop::collection::vec(0.01f64..1.0, 3),
        a1 in 0usize..4,
        off in 1usize..4,
    ) {
        let spec = EnvSpec::default();
        let total: f64 = w.iter().sum();
        let user = UserProfile::new(w.iter().map(|v| v / total).collect()).unwrap();
        let x = Context::new(x).unwrap();
        let a2 = (a1 + off) % 4;
        let p = preference_prob(&spec, &user, ActionId(a1), ActionId(a2), &x).unwrap();
        let q = preference_prob(&spec, &user, ActionId(a2), ActionId(a1), &x).unwrap();
        prop_assert!((p + q - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn reward_is_linear_in_the_profile(
        x in prop::collection::vec(0.0f64..=1.0, 3),
        w in prop::collection::vec(0.01f64..1.0, 3),
        a in 0usize..4,
    ) {
        let spec = EnvSpec::default();
        let total: f64 = w.iter().sum();
        let weights: Vec<f64> = w.iter().map(|v| v / total).collect();
        let x = Context::new(x).unwrap();
        let mixed = reward(&spec, &UserProfile::new(weights.clone()).unwrap(), ActionId(a), &x, 0.0);
        let combo: f64 = (0..3).map(|g| weights[g] * reward(&spec, &UserProfile::pure(g, 3), ActionId(a), &x, 0.0)).sum();
        prop_assert!((mixed - combo).abs() < 1e-12);
    }

    #[test]
    fn sampled_contexts_and_users_are_valid(seed in any::<u64>()) {
        let spec = EnvSpec::default();
        let mut rng = Rng::new(seed);
        let x = sample_context(&mut rng, &spec);
        prop_assert_eq!(x.dim(), 3);
        prop_assert!(x.coords().iter().all(|c| (0.0..=1.0).contains(c)));
        let u = sample_mixed_user(&mut rng, 3).unwrap();
        prop_assert!((u.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
