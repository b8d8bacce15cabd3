use ppt_core::datagen::generate_offline;
use ppt_core::dpo::{train_ppt_with, train_ps_models_with, DpoConfig};
use ppt_core::env::EnvSpec;
use ppt_core::model::{init_params, ModelConfig};
use ppt_core::numcore::Rng;
use ppt_core::selftest::tiny_config;

#[test]
fn small_ppt_run_reduces_loss() {
    let spec = EnvSpec::default();
    let ds = generate_offline(&Rng::new(1), &spec, 200, &[1.0, 0.8, 0.6], 15).unwrap();
    let dpo = DpoConfig {
        epochs: 8,
        learning_rate: 1e-3,
        ..DpoConfig::default()
    };
    let mut seen = Vec::new();
    let (_, report) = train_ppt_with(&Rng::new(2), &ds, &tiny_config(), &dpo, |e, l| seen.push((e, l))).unwrap();
    assert!((report.initial_loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(seen.len(), 8);
    assert_eq!(report.epoch_losses, seen.iter().map(|s| s.1).collect::<Vec<_>>());
    assert!(report.final_loss < report.initial_loss);
}

#[test]
fn ps_models_share_init_and_are_reproducible() {
    let spec = EnvSpec::default();
    let ds = generate_offline(&Rng::new(3), &spec, 120, &[1.0, 0.8, 0.6], 15).unwrap();
    let cfg = tiny_config();
    let dpo = DpoConfig {
        epochs: 3,
        ..DpoConfig::default()
    };
    let (models, reports) = train_ps_models_with(&Rng::new(4), &ds, &cfg, &dpo, |_, _, _| {}).unwrap();
    assert_eq!(models.len(), 3);
    for r in &reports {
        assert!((r.initial_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
    assert_ne!(models[0], models[1]);
    let (again, _) = train_ps_models_with(&Rng::new(4), &ds, &cfg, &dpo, |_, _, _| {}).unwrap();
    assert_eq!(again, models);
    // The starting point is the shared "model" fork.
    let init = init_params(&Rng::new(4).fork("model"), &cfg).unwrap();
    init.check_same_layout(&models[2]).unwrap();
}

/// Epoch-mean loss on the default network is non-increasing over the first
/// five epochs, allowing a single inversion of at most 1e-3.
#[test]
fn default_network_improves_over_first_epochs() {
    let spec = EnvSpec::default();
    let ds = generate_offline(&Rng::new(7), &spec, 500, &[1.0, 0.8, 0.6], 15).unwrap();
    let dpo = DpoConfig {
        epochs: 5,
        ..DpoConfig::default()
    };
    let (_, report) = train_ppt_with(&Rng::new(8), &ds, &ModelConfig::default(), &dpo, |_, _| {}).unwrap();
    let l = &report.epoch_losses;
    let mut inversions = 0;
    for w in l.windows(2) {
        if w[1] > w[0] {
            inversions += 1;
            assert!(w[1] - w[0] <= 1e-3, "{l:?}");
        }
    }
    assert!(inversions <= 1, "{l:?}");
}
