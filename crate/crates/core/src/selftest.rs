//! Fast runtime checks of the invariants the pipeline relies on, usable from
//! the command line without the test harness.

use std::time::Instant;

use crate::config::{ExperimentConfig, PRESETS};
use crate::datagen::{generate_offline, load_dataset, save_dataset, HistorySequence, PreferenceTriple};
use crate::dpo::{history_dpo_loss, history_dpo_loss_value, ReferencePolicy};
use crate::env::{sample_context, sample_preference, ActionId, EnvSpec, UserProfile};
use crate::error::Result;
use crate::eval::{eval_ps_online, UserCase};
use crate::model::{encode_history, forward, init_params, ModelConfig, PolicyParams};
use crate::numcore::gradcheck::{check_gradients, FD_STEP};
use crate::numcore::{adam_step, load_checkpoint, save_checkpoint, value_and_grad, AdamConfig, OptState, ParamStore, Rng};
use crate::soups::{build_ensemble, interpolate, ps_select_step, SelectionState};

/// Exact parameter count of the default network.
pub const DEFAULT_PARAM_COUNT: usize = 4_748_036;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const BT_TOL: f64 = 0.010;
pub const LN2_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

/// Two-layer, width-16 network used by the structural checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        ..ModelConfig::default()
    }
}

/// Initial parameters with every entry jittered by `N(0, std²)`, so that no
/// gradient path is trivially zero (the default head starts at zero).
pub fn randomized_params(rng: &Rng, config: &ModelConfig, std: f64) -> Result<PolicyParams> {
    let mut params = init_params(rng, config)?;
    let mut noise = rng.fork("jitter");
    for (_, a) in params.iter_mut() {
        for v in a.data_mut() {
            *v += noise.gaussian(0.0, std);
        }
    }
    Ok(params)
}

/// `count` histories of length `len` with uniformly random contexts and pairs.
pub fn random_histories(rng: &mut Rng, spec: &EnvSpec, count: usize, len: usize) -> Result<Vec<HistorySequence>> {
    (0..count)
        .map(|i| {
            let triples = (0..len)
                .map(|_| {
                    let x = sample_context(rng, spec);
                    let w = rng.below(spec.num_actions);
                    let l = (w + 1 + rng.below(spec.num_actions - 1)) % spec.num_actions;
                    PreferenceTriple::new(x, ActionId(w), ActionId(l))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(HistorySequence {
                group: i % spec.num_groups,
                triples,
            })
        })
        .collect()
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name,
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

pub fn check_configs() -> Result<(bool, String)> {
    for p in PRESETS {
        ExperimentConfig::preset(p)?.validate()?;
    }
    let c = ExperimentConfig::preset("paper-500")?;
    let ok = c.data.n_c == 500
        && c.data.horizon == 15
        && c.eval.test_contexts == 50
        && c.data.coverage == [1.0, 0.8, 0.6]
        && (c.model.layers, c.model.heads, c.model.hidden) == (6, 4, 256)
        && c.soups.size == 100;
    let mut bad = c.clone();
    bad.data.coverage[0] = 1.5;
    let rejected = bad.validate().is_err();
    Ok((ok && rejected, format!("presets valid; paper-500 pinned: {ok}; coverage 1.5 rejected: {rejected}")))
}

pub fn check_rng() -> Result<(bool, String)> {
    let root = Rng::new(17);
    let a: Vec<u64> = (0..8).map(|_| root.fork("x").next_u64()).collect();
    let mut f1 = root.fork("x");
    let mut f2 = root.fork("x");
    let same = (0..100).all(|_| f1.next_u64() == f2.next_u64());
    let distinct = root.fork("x").next_u64() != root.fork("y").next_u64();
    let w = Rng::new(5).dirichlet_uniform(3)?;
    let simplex = w.iter().all(|v| *v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    let ok = same && distinct && simplex && a.windows(2).all(|p| p[0] == p[1]);
    Ok((ok, format!("forks reproducible: {same}; named forks differ: {distinct}; dirichlet on simplex: {simplex}")))
}

pub fn check_env() -> Result<(bool, String)> {
    let spec = EnvSpec::default();
    spec.validate()?;
    let bests: Vec<usize> = (0..3).map(|g| spec.best_action(&UserProfile::pure(g, 3)).0).collect();
    Ok((bests == [0, 1, 2], format!("default table valid; pure-group best actions {bests:?}")))
}

/// Winner frequency at a reward gap of 2 (s(x) = 1, no noise).
pub fn check_bradley_terry(draws: usize) -> Result<(bool, String)> {
    let spec = EnvSpec {
        noise_sigma: 0.0,
        ..EnvSpec::default()
    };
    let x = crate::env::Context::new(vec![0.5, 0.5, 0.5])?;
    let scale = crate::env::context_scale(&spec, &x);
    let user = UserProfile::pure(0, 3);
    let mut rng = Rng::new(2024).fork("bt");
    let mut wins = 0usize;
    for _ in 0..draws {
        // Group 0 scores action 1 at 5 and action 2 at 3.
        let (w, _) = sample_preference(&mut rng, &spec, &user, ActionId(1), ActionId(2), &x)?;
        if w == ActionId(1) {
            wins += 1;
        }
    }
    let freq = wins as f64 / draws as f64;
    let expected = 1.0 / (1.0 + (-2.0f64).exp());
    let ok = (scale - 1.0).abs() < 1e-12 && (freq - expected).abs() <= BT_TOL;
    Ok((ok, format!("s(x) = {scale}; frequency {freq:.4} vs {expected:.4} ± {BT_TOL}")))
}

pub fn check_data_accounting() -> Result<(bool, String)> {
    let spec = EnvSpec::default();
    let ds = generate_offline(&Rng::new(9), &spec, 500, &[1.0, 0.8, 0.6], 15)?;
    let triples = ds.triple_counts();
    let seqs = ds.sequence_counts();
    let path = std::env::temp_dir().join(format!("ppt-selftest-{}.jsonl", std::process::id()));
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path);
    let _ = std::fs::remove_file(&path);
    let round_trip = back? == ds;
    let ok = triples == [500, 400, 300] && seqs == [33, 26, 20] && round_trip;
    Ok((ok, format!("triples {triples:?}; sequences {seqs:?}; file round trip: {round_trip}")))
}

pub fn check_param_count() -> Result<(bool, String)> {
    let cfg = ModelConfig::default();
    let declared: usize = cfg.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let built = init_params(&Rng::new(1), &cfg)?.num_values();
    Ok((
        declared == DEFAULT_PARAM_COUNT && built == DEFAULT_PARAM_COUNT,
        format!("declared {declared}, initialized {built}, expected {DEFAULT_PARAM_COUNT}"),
    ))
}

/// A freshly initialized model scores every batch at exactly ln 2.
pub fn check_loss_anchor() -> Result<(bool, String)> {
    let spec = EnvSpec::default();
    let cfg = tiny_config();
    let reference = ReferencePolicy::uniform(cfg.num_actions);
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let rng = Rng::new(seed);
        let params = init_params(&rng, &cfg)?;
        let hs = random_histories(&mut rng.fork("data"), &spec, 4, 1 + seed as usize * 3)?;
        let refs: Vec<&HistorySequence> = hs.iter().collect();
        let loss = history_dpo_loss_value(&params, &cfg, &reference, &refs, 1.0)?;
        worst = worst.max((loss - std::f64::consts::LN_2).abs());
    }
    Ok((worst <= LN2_TOL, format!("max |loss − ln 2| = {worst:.3e}")))
}

/// Reverse-mode gradients against central differences on a small network.
pub fn check_gradients_small(restarts: u64) -> Result<(bool, String)> {
    let spec = EnvSpec::default();
    let cfg = tiny_config();
    let reference = ReferencePolicy::uniform(cfg.num_actions);
    let mut worst = 0.0f64;
    let mut where_ = String::new();
    let mut checked = 0;
    for r in 0..restarts {
        let rng = Rng::new(1000 + r);
        let params = randomized_params(&rng, &cfg, 0.3)?;
        let hs = random_histories(&mut rng.fork("data"), &spec, 2, 4)?;
        let refs: Vec<&HistorySequence> = hs.iter().collect();
        let (_, grads) = value_and_grad(&params, |g, v| history_dpo_loss(g, v, &cfg, &reference, &refs, 1.0))?;
        let report = check_gradients(&params, &grads, FD_STEP, 1, |p| history_dpo_loss_value(p, &cfg, &reference, &refs, 1.0))?;
        checked += report.checked;
        if report.max_rel_err >= worst {
            worst = report.max_rel_err;
            where_ = format!(
                "{}[{}] analytic {:.6e} numeric {:.6e}",
                report.worst_param, report.worst_index, report.worst_analytic, report.worst_numeric
            );
        }
    }
    Ok((
        worst <= GRAD_REL_TOL,
        format!("{checked} entries over {restarts} restarts; max rel err {worst:.3e} at {where_}"),
    ))
}

/// Perturbing token `t` leaves every earlier output bit-identical.
pub fn check_causality(cases: u64) -> Result<(bool, String)> {
    let spec = EnvSpec::default();
    let cfg = tiny_config();
    let mut violations = 0;
    let mut changed_at_t = 0;
    for c in 0..cases {
        let rng = Rng::new(500 + c);
        let params = randomized_params(&rng, &cfg, 0.3)?;
        let mut data = rng.fork("data");
        let len = 2 + data.below(cfg.max_positions - 1);
        let h = random_histories(&mut data, &spec, 1, len)?.remove(0);
        let tokens = encode_history(&cfg, &h.triples)?;
        let base = forward(&params, &cfg, &tokens)?;
        let t = 1 + data.below(len - 1);
        let mut perturbed = tokens.clone();
        let new: Vec<f64> = (0..cfg.token_dim()).map(|_| data.unit()).collect();
        perturbed.set_token(t, &new);
        let out = forward(&params, &cfg, &perturbed)?;
        if base[..t] != out[..t] {
            violations += 1;
        }
        if base[t] != out[t] {
            changed_at_t += 1;
        }
    }
    Ok((
        violations == 0 && changed_at_t == cases,
        format!("{cases} cases; earlier-position changes {violations}; perturbed position changed in {changed_at_t}"),
    ))
}

pub fn check_soups() -> Result<(bool, String)> {
    let cfg = tiny_config();
    let spec = EnvSpec::default();
    let base: Vec<PolicyParams> = (0..3)
        .map(|g| randomized_params(&Rng::new(70 + g), &cfg, 0.3))
        .collect::<Result<_>>()?;
    let refs: Vec<&ParamStore> = base.iter().collect();
    let vertices_exact = (0..3).all(|g| {
        let mut w = vec![0.0; 3];
        w[g] = 1.0;
        interpolate(&refs, &w).map(|m| m == base[g]).unwrap_or(false)
    });

    let mut draws = Rng::new(71);
    let mut convex_violations = 0usize;
    for _ in 0..10 {
        let w = draws.dirichlet_uniform(3)?;
        let m = interpolate(&refs, &w)?;
        for (name, a) in m.iter() {
            let parts: Vec<&[f64]> = base.iter().map(|b| b.get(name).expect("same layout").data()).collect();
            for (i, v) in a.data().iter().enumerate() {
                let lo = parts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
                let hi = parts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
                if *v < lo - slack || *v > hi + slack {
                    convex_violations += 1;
                }
            }
        }
    }

    // Selection bookkeeping: replay scores from the per-turn log-probabilities
    // and from step-by-step re-scoring.
    let ensemble = build_ensemble(&Rng::new(72), base, 8)?;
    let mut ctx = Rng::new(73);
    let test: Vec<_> = (0..4).map(|_| sample_context(&mut ctx, &spec)).collect();
    let val: Vec<_> = (0..5).map(|_| sample_context(&mut ctx, &spec)).collect();
    let user = UserCase {
        label: "group2".into(),
        profile: UserProfile::pure(1, 3),
    };
    let run = eval_ps_online(&mut Rng::new(74), &ensemble, &cfg, &spec, &user, 0, &test, &val)?;
    let mut cumulative = vec![0.0; ensemble.len()];
    let mut stepped = SelectionState {
        cumulative_scores: vec![0.0; ensemble.len()],
        best_index: 0,
    };
    let mut max_dev = 0.0f64;
    for (t, entry) in run.trace.iter().enumerate() {
        for (c, lp) in cumulative.iter_mut().zip(&run.log_probs[t]) {
            *c += lp;
        }
        max_dev = max_dev.max((cumulative[entry.best_index] - entry.best_score).abs());
        stepped = ps_select_step(&stepped, &ensemble, &cfg, &val[t], entry.winner)?;
        max_dev = max_dev.max(
            stepped
                .cumulative_scores
                .iter()
                .zip(&cumulative)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    let final_dev = run
        .final_state
        .cumulative_scores
        .iter()
        .zip(&cumulative)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    max_dev = max_dev.max(final_dev);
    let same_leader = stepped.best_index == run.final_state.best_index;
    let ok = vertices_exact && convex_violations == 0 && max_dev <= 1e-9 && same_leader;
    Ok((
        ok,
        format!(
            "vertices exact: {vertices_exact}; convexity violations {convex_violations}; score recomputation max dev {max_dev:.3e}; leaders agree: {same_leader}"
        ),
    ))
}

pub fn check_optimizer_and_checkpoint() -> Result<(bool, String)> {
    let cfg = tiny_config();
    let params = randomized_params(&Rng::new(90), &cfg, 0.1)?;
    let spec = EnvSpec::default();
    let hs = random_histories(&mut Rng::new(91), &spec, 2, 3)?;
    let refs: Vec<&HistorySequence> = hs.iter().collect();
    let reference = ReferencePolicy::uniform(cfg.num_actions);
    let run = || -> Result<ParamStore> {
        let mut p = params.clone();
        let mut st = OptState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            let (_, g) = value_and_grad(&p, |gr, v| history_dpo_loss(gr, v, &cfg, &reference, &refs, 1.0))?;
            adam_step(&mut p, &g, &mut st)?;
        }
        Ok(p)
    };
    let a = run()?;
    let deterministic = a == run()?;
    let path = std::env::temp_dir().join(format!("ppt-selftest-{}.json", std::process::id()));
    save_checkpoint(&path, &a, serde_json::json!({"check": true}))?;
    let loaded = load_checkpoint(&path);
    let _ = std::fs::remove_file(&path);
    let _ = std::fs::remove_file(crate::numcore::checkpoint::blob_path(&path));
    let (back, meta) = loaded?;
    let exact = back == a && meta["check"] == true;
    Ok((
        deterministic && exact,
        format!("adam deterministic: {deterministic}; checkpoint bit-exact: {exact}"),
    ))
}

/// Runs every check; the slow ones use reduced sizes when `quick` is set.
pub fn run_all(quick: bool) -> Vec<CheckOutcome> {
    let restarts = if quick { 2 } else { 5 };
    vec![
        check("config presets", check_configs),
        check("rng streams", check_rng),
        check("environment table", check_env),
        check("bradley-terry frequency", || check_bradley_terry(20_000)),
        check("data accounting", check_data_accounting),
        check("parameter count", check_param_count),
        check("initial loss is ln 2", check_loss_anchor),
        check("gradients vs finite differences", || check_gradients_small(restarts)),
        check("causal masking", || check_causality(20)),
        check("soup identities", check_soups),
        check("optimizer and checkpoint", check_optimizer_and_checkpoint),
    ]
}
