//! Online evaluation of both methods against simulated users.
//!
//! At each turn the current policy is first scored on a fixed set of test
//! contexts (noiseless expected reward and greedy accuracy), and only then
//! interacts once with the user on that turn's validation context.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{generate_offline, sample_distinct_pair, OfflineDataset, PreferenceTriple};
use crate::dpo::{train_ppt, train_ps_models};
use crate::env::{reward, sample_mixed_user, sample_preference, ActionId, Context, EnvSpec, UserProfile};
use crate::error::{Error, Result};
use crate::model::{argmax_action, policy_batch, ModelConfig, PolicyParams};
use crate::numcore::Rng;
use crate::soups::{build_ensemble, init_selection, winner_log_probs, SelectionState, SoupEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of test contexts scored at every turn.
    #[serde(rename = "L")]
    pub test_contexts: usize,
    pub turns: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_contexts: 50,
            turns: 15,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ppt,
    Ps,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ppt => "ppt",
            Method::Ps => "ps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ppt" => Some(Method::Ppt),
            "ps" => Some(Method::Ps),
            _ => None,
        }
    }
}

/// Metrics of one method for one user at one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub method: Method,
    pub user: String,
    pub seed: u64,
    pub turn: usize,
    pub reward: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveTable {
    pub records: Vec<TurnRecord>,
}

/// The evaluated users: every pure group, then one mixed user.
pub fn user_label(group: Option<usize>) -> String {
    match group {
        Some(g) => format!("group{}", g + 1),
        None => "mixed".to_string(),
    }
}

/// Test contexts, then validation contexts, drawn without replacement from
/// the dataset's contexts.
pub fn pick_eval_contexts(rng: &mut Rng, dataset: &OfflineDataset, test: usize, turns: usize) -> Result<(Vec<Context>, Vec<Context>)> {
    let pool = dataset.contexts();
    if test == 0 {
        return Err(Error::invalid("need at least one test context"));
    }
    if pool.len() < test + turns {
        return Err(Error::invalid(format!(
            "dataset has {} contexts; {test} test + {turns} validation needed",
            pool.len()
        )));
    }
    let order = rng.permutation(pool.len());
    let test_set = order[..test].iter().map(|&i| pool[i].clone()).collect();
    let val_set = order[test..test + turns].iter().map(|&i| pool[i].clone()).collect();
    Ok((test_set, val_set))
}

/// Mean noiseless expected reward and greedy accuracy of `dists` (one
/// distribution per test context) for `user`.
pub fn metrics_from_dists(spec: &EnvSpec, user: &UserProfile, test: &[Context], dists: &[Vec<f64>]) -> Result<(f64, f64)> {
    if test.is_empty() || dists.len() != test.len() {
        return Err(Error::invalid(format!("{} distributions for {} contexts", dists.len(), test.len())));
    }
    let best = spec.best_action(user);
    let mut reward_sum = 0.0;
    let mut hits = 0usize;
    for (x, p) in test.iter().zip(dists) {
        reward_sum += p
            .iter()
            .enumerate()
            .map(|(a, pa)| pa * reward(spec, user, ActionId(a), x, 0.0))
            .sum::<f64>();
        if argmax_action(p) == best {
            hits += 1;
        }
    }
    let n = test.len() as f64;
    Ok((reward_sum / n, hits as f64 / n))
}

/// Scores a policy given as a function from contexts to distributions.
pub fn metrics<F>(policy: F, spec: &EnvSpec, user: &UserProfile, test: &[Context]) -> Result<(f64, f64)>
where
    F: FnOnce(&[Context]) -> Result<Vec<Vec<f64>>>,
{
    let dists = policy(test)?;
    metrics_from_dists(spec, user, test, &dists)
}

/// Two distinct actions from `dist`: a categorical draw, then a draw from the
/// remaining mass renormalized.
pub fn sample_two_distinct(rng: &mut Rng, dist: &[f64]) -> Result<(ActionId, ActionId)> {
    let first = rng.categorical(dist)?;
    let rest: f64 = dist.iter().enumerate().filter(|(i, _)| *i != first).map(|(_, p)| p).sum();
    let second_probs: Vec<f64> = if rest > 0.0 {
        dist.iter()
            .enumerate()
            .map(|(i, p)| if i == first { 0.0 } else { p / rest })
            .collect()
    } else {
        let n = dist.len() as f64 - 1.0;
        (0..dist.len()).map(|i| if i == first { 0.0 } else { 1.0 / n }).collect()
    };
    let second = rng.categorical(&second_probs)?;
    Ok((ActionId(first), ActionId(second)))
}

/// Output of one online run of the history-conditioned policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PptRun {
    pub records: Vec<TurnRecord>,
    pub history: Vec<PreferenceTriple>,
}

/// Identifies the evaluated user in the records.
#[derive(Debug, Clone, PartialEq)]
pub struct UserCase {
    pub label: String,
    pub profile: UserProfile,
}

pub fn eval_ppt_online(
    rng: &mut Rng,
    params: &PolicyParams,
    config: &ModelConfig,
    spec: &EnvSpec,
    user: &UserCase,
    seed: u64,
    test: &[Context],
    val: &[Context],
) -> Result<PptRun> {
    if val.len() + 1 > config.max_positions {
        return Err(Error::invalid(format!(
            "{} turns do not fit max_positions = {}",
            val.len(),
            config.max_positions
        )));
    }
    let mut history: Vec<PreferenceTriple> = Vec::with_capacity(val.len());
    let mut records = Vec::with_capacity(val.len());
    for (t, x_val) in val.iter().enumerate() {
        let mut queries = test.to_vec();
        queries.push(x_val.clone());
        let mut dists = policy_batch(params, config, &history, &queries)?;
        let val_dist = dists.pop().expect("validation query");
        let (r, acc) = metrics_from_dists(spec, &user.profile, test, &dists)?;
        records.push(TurnRecord {
            method: Method::Ppt,
            user: user.label.clone(),
            seed,
            turn: t + 1,
            reward: r,
            accuracy: acc,
        });
        let (a1, a2) = sample_two_distinct(rng, &val_dist)?;
        let (winner, loser) = sample_preference(rng, spec, &user.profile, a1, a2, x_val)?;
        history.push(PreferenceTriple::new(x_val.clone(), winner, loser)?);
    }
    Ok(PptRun { records, history })
}

/// One turn of soup selection, for the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTraceEntry {
    pub turn: usize,
    /// Member whose metrics were recorded at this turn.
    pub evaluated_index: usize,
    pub evaluated_weights: Vec<f64>,
    pub winner: ActionId,
    pub loser: ActionId,
    pub best_score: f64,
    pub worst_score: f64,
    /// Leader after this turn's update.
    pub best_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsRun {
    pub records: Vec<TurnRecord>,
    pub trace: Vec<SelectionTraceEntry>,
    /// `log_probs[t][i]`: member `i`'s winner log-probability at turn `t`.
    pub log_probs: Vec<Vec<f64>>,
    pub final_state: SelectionState,
}

/// Online soup selection.
///
/// Candidate pairs come from the uniform reference and never depend on the
/// selection, so each member is materialized once and scored on every turn
/// (and on the test contexts) in a single batched pass; the selection then
/// replays turn by turn exactly as a step-by-step loop would.
pub fn eval_ps_online(
    rng: &mut Rng,
    ensemble: &SoupEnsemble,
    config: &ModelConfig,
    spec: &EnvSpec,
    user: &UserCase,
    seed: u64,
    test: &[Context],
    val: &[Context],
) -> Result<PsRun> {
    let mut state = init_selection(rng, ensemble.len())?;
    let mut turns = Vec::with_capacity(val.len());
    for x_val in val {
        let (a1, a2) = sample_distinct_pair(rng, spec.num_actions);
        let (winner, loser) = sample_preference(rng, spec, &user.profile, a1, a2, x_val)?;
        turns.push((x_val.clone(), winner, loser));
    }
    let scored: Vec<(Context, ActionId)> = turns.iter().map(|(x, w, _)| (x.clone(), *w)).collect();

    let mut member_metrics = Vec::with_capacity(ensemble.len());
    let mut member_log_probs = Vec::with_capacity(ensemble.len());
    for i in 0..ensemble.len() {
        let member = ensemble.member(i)?;
        let dists = policy_batch(&member, config, &[], test)?;
        member_metrics.push(metrics_from_dists(spec, &user.profile, test, &dists)?);
        member_log_probs.push(winner_log_probs(&member, config, &scored)?);
    }

    let mut records = Vec::with_capacity(val.len());
    let mut trace = Vec::with_capacity(val.len());
    let mut log_probs = Vec::with_capacity(val.len());
    for (t, (_, winner, loser)) in turns.iter().enumerate() {
        let evaluated = state.best_index;
        let (r, acc) = member_metrics[evaluated];
        records.push(TurnRecord {
            method: Method::Ps,
            user: user.label.clone(),
            seed,
            turn: t + 1,
            reward: r,
            accuracy: acc,
        });
        let step: Vec<f64> = member_log_probs.iter().map(|lp| lp[t]).collect();
        state = state.apply_scores(&step)?;
        let best_score = state.cumulative_scores[state.best_index];
        let worst_score = state.cumulative_scores.iter().cloned().fold(f64::INFINITY, f64::min);
        trace.push(SelectionTraceEntry {
            turn: t + 1,
            evaluated_index: evaluated,
            evaluated_weights: ensemble.weight_vectors[evaluated].clone(),
            winner: *winner,
            loser: *loser,
            best_score,
            worst_score,
            best_index: state.best_index,
        });
        log_probs.push(step);
    }
    Ok(PsRun {
        records,
        trace,
        log_probs,
        final_state: state,
    })
}

/// Everything one seed needs for evaluation.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub dataset: OfflineDataset,
    pub ppt: PolicyParams,
    pub ps_models: Vec<PolicyParams>,
}

/// Root random stream of one evaluation seed.
pub fn seed_rng(config: &ExperimentConfig, seed: u64) -> Rng {
    Rng::new(config.seed).fork(&format!("run/{seed}"))
}

/// Generates data and trains both methods for one seed.
pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let root = seed_rng(config, seed);
    let dataset = generate_offline(
        &root.fork("data"),
        &config.env,
        config.data.n_c,
        &config.data.coverage,
        config.data.horizon,
    )?;
    let (ppt, _) = train_ppt(&root.fork("train-ppt"), &dataset, &config.model, &config.dpo)?;
    let ps_models = train_ps_models(&root.fork("train-ps"), &dataset, &config.model, &config.dpo)?;
    Ok(SeedArtifacts { dataset, ppt, ps_models })
}

/// Per-seed evaluation output.
#[derive(Debug, Clone)]
pub struct SeedEval {
    pub records: Vec<TurnRecord>,
    pub ps_traces: Vec<(String, Vec<SelectionTraceEntry>)>,
    pub mixed_user: UserProfile,
}

/// The users evaluated for `seed`: pure groups in order, then a mixed user.
pub fn eval_users(config: &ExperimentConfig, seed: u64) -> Result<Vec<UserCase>> {
    let k = config.env.num_groups;
    let mut users: Vec<UserCase> = (0..k)
        .map(|g| UserCase {
            label: user_label(Some(g)),
            profile: UserProfile::pure(g, k),
        })
        .collect();
    let mixed = sample_mixed_user(&mut seed_rng(config, seed).fork("mixed-user"), k)?;
    users.push(UserCase {
        label: user_label(None),
        profile: mixed,
    });
    Ok(users)
}

/// Evaluates both methods on every user for one seed, with shared contexts.
pub fn evaluate_seed(config: &ExperimentConfig, seed: u64, artifacts: &SeedArtifacts) -> Result<SeedEval> {
    let root = seed_rng(config, seed);
    let (test, val) = pick_eval_contexts(
        &mut root.fork("eval-contexts"),
        &artifacts.dataset,
        config.eval.test_contexts,
        config.eval.turns,
    )?;
    let ensemble = build_ensemble(&root.fork("soups"), artifacts.ps_models.clone(), config.soups.size)?;
    let users = eval_users(config, seed)?;
    let mut records = Vec::new();
    for user in &users {
        let mut rng = root.fork(&format!("interact/ppt/{}", user.label));
        let run = eval_ppt_online(&mut rng, &artifacts.ppt, &config.model, &config.env, user, seed, &test, &val)?;
        records.extend(run.records);
    }
    let mut ps_traces = Vec::new();
    for user in &users {
        let mut rng = root.fork(&format!("interact/ps/{}", user.label));
        let run = eval_ps_online(&mut rng, &ensemble, &config.model, &config.env, user, seed, &test, &val)?;
        records.extend(run.records);
        ps_traces.push((user.label.clone(), run.trace));
    }
    Ok(SeedEval {
        records,
        ps_traces,
        mixed_user: users.last().expect("mixed user").profile.clone(),
    })
}

/// Full in-memory experiment: data, training and evaluation for every seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<CurveTable> {
    config.validate()?;
    let mut table = CurveTable::default();
    for &seed in &config.eval.seeds {
        let artifacts = prepare_seed(config, seed)?;
        table.records.extend(evaluate_seed(config, seed, &artifacts)?.records);
    }
    Ok(table)
}

pub const CSV_HEADER: &str = "method,user,seed,turn,reward,accuracy";

/// Writes the table as CSV, preceded by `# key=value` comment lines.
pub fn write_csv(table: &CurveTable, path: &Path, meta: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        writeln!(out, "# {k}={v}").expect("write to string");
    }
    writeln!(out, "{CSV_HEADER}").expect("write to string");
    for r in &table.records {
        writeln!(
            out,
            "{},{},{},{},{:?},{:?}",
            r.method.as_str(),
            r.user,
            r.seed,
            r.turn,
            r.reward,
            r.accuracy
        )
        .expect("write to string");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a CSV written by [`write_csv`]; returns the table and its comment metadata.
pub fn read_csv(path: &Path) -> Result<(CurveTable, BTreeMap<String, String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut meta = BTreeMap::new();
    let mut table = CurveTable::default();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(c) = line.strip_prefix('#') {
            if let Some((k, v)) = c.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            if line.trim() != CSV_HEADER {
                return Err(err(lineno, format!("expected header `{CSV_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(lineno, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|e| err(lineno, format!("{what}: {e}")));
        let int = |s: &str, what: &str| s.trim().parse::<u64>().map_err(|e| err(lineno, format!("{what}: {e}")));
        table.records.push(TurnRecord {
            method: Method::parse(f[0].trim()).ok_or_else(|| err(lineno, format!("unknown method `{}`", f[0])))?,
            user: f[1].trim().to_string(),
            seed: int(f[2], "seed")?,
            turn: int(f[3], "turn")? as usize,
            reward: num(f[4], "reward")?,
            accuracy: num(f[5], "accuracy")?,
        });
    }
    if !saw_header {
        return Err(err(1, "missing CSV header".into()));
    }
    Ok((table, meta))
}

/// Mean ± standard error across seeds for one (method, user, turn).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub user: String,
    pub turn: usize,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_stderr: f64,
    pub accuracy_mean: f64,
    pub accuracy_stderr: f64,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates across seeds; rows come out ordered by method, then user in
/// first-appearance order, then turn.
pub fn summarize(table: &CurveTable) -> Result<Vec<SummaryRow>> {
    if table.records.is_empty() {
        return Err(Error::invalid("cannot summarize an empty table"));
    }
    let mut user_order: Vec<&str> = Vec::new();
    for r in &table.records {
        if !user_order.contains(&r.user.as_str()) {
            user_order.push(&r.user);
        }
    }
    let mut groups: BTreeMap<(Method, usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &table.records {
        let u = user_order.iter().position(|u| *u == r.user).expect("user indexed");
        let e = groups.entry((r.method, u, r.turn)).or_default();
        e.0.push(r.reward);
        e.1.push(r.accuracy);
    }
    Ok(groups
        .into_iter()
        .map(|((method, u, turn), (rewards, accs))| {
            let (rm, rs) = mean_stderr(&rewards);
            let (am, as_) = mean_stderr(&accs);
            SummaryRow {
                method,
                user: user_order[u].to_string(),
                turn,
                seeds: rewards.len(),
                reward_mean: rm,
                reward_stderr: rs,
                accuracy_mean: am,
                accuracy_stderr: as_,
            }
        })
        .collect())
}

/// Looks up a summary row.
pub fn summary_at<'a>(rows: &'a [SummaryRow], method: Method, user: &str, turn: usize) -> Option<&'a SummaryRow> {
    rows.iter().find(|r| r.method == method && r.user == user && r.turn == turn)
}
