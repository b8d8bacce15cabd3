//! Preference-optimization losses and the two training loops.
//!
//! The history-dependent loss applies the DPO logistic term at every turn of
//! a history, with the policy conditioned on the turns before it:
//!
//! ```text
//! term_t = −log σ( β·log(M(x_t; H_{t−1})[w_t] / ref[w_t]) − β·log(M(x_t; H_{t−1})[l_t] / ref[l_t]) )
//! ```
//!
//! averaged over turns, histories, and (through group-balanced batches) groups.
//! The standard loss is the same term with an empty history.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{reshuffle_epoch, HistorySequence, OfflineDataset, PreferenceTriple};
use crate::error::{Error, Result};
use crate::model::{build_logits, encode_history, encode_sequence, init_params, ModelConfig, PolicyParams, TokenSequence};
use crate::numcore::{adam_step, value_and_grad, value_only, AdamConfig, Graph, OptState, ParamVars, Rng, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Histories per step when training the history-conditioned policy.
    pub batch_size: usize,
    /// Triples per step when training the per-group models.
    pub ps_batch_size: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: 3e-4,
            epochs: 60,
            batch_size: 16,
            ps_batch_size: 64,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("dpo.beta", "must be > 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("dpo.learning_rate", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("dpo.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dpo.batch_size", "must be at least 1"));
        }
        if self.ps_batch_size == 0 {
            return Err(Error::config("dpo.ps_batch_size", "must be at least 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// The fixed policy the log-ratios are measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    probs: Vec<f64>,
}

impl ReferencePolicy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("reference policy {probs:?} must be strictly positive and sum to 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_actions: usize) -> Self {
        Self {
            probs: vec![1.0 / num_actions as f64; num_actions],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn is_uniform(&self) -> bool {
        self.probs.iter().all(|p| *p == self.probs[0])
    }
}

/// Adds the mean DPO term over every row of `logits` to the graph.
fn dpo_term_mean(graph: &mut Graph<'_>, logits: Var, winners: &[usize], losers: &[usize], reference: &ReferencePolicy, beta: f64) -> Var {
    let logp = graph.log_softmax(logits);
    let lw = graph.pick(logp, winners);
    let ll = graph.pick(logp, losers);
    let diff = graph.sub(lw, ll);
    let mut z = graph.scale(diff, beta);
    if !reference.is_uniform() {
        let offsets: Vec<f64> = winners
            .iter()
            .zip(losers)
            .map(|(&w, &l)| beta * (reference.probs[l].ln() - reference.probs[w].ln()))
            .collect();
        let c = graph.constant(offsets.len(), 1, offsets);
        z = graph.add(z, c);
    }
    let ls = graph.log_sigmoid(z);
    let m = graph.mean(ls);
    graph.scale(m, -1.0)
}

fn check_actions(triples: &[&PreferenceTriple], reference: &ReferencePolicy) -> Result<()> {
    let a = reference.probs.len();
    if let Some(t) = triples.iter().find(|t| t.winner.index() >= a || t.loser.index() >= a || t.winner == t.loser) {
        return Err(Error::invalid(format!("invalid triple ({}, {})", t.winner.0, t.loser.0)));
    }
    Ok(())
}

/// History-dependent DPO loss over a batch of equal-length histories.
pub fn history_dpo_loss(
    graph: &mut Graph<'_>,
    vars: &ParamVars,
    config: &ModelConfig,
    reference: &ReferencePolicy,
    batch: &[&HistorySequence],
    beta: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let triples: Vec<&PreferenceTriple> = batch.iter().flat_map(|s| s.triples.iter()).collect();
    check_actions(&triples, reference)?;
    let tokens = batch
        .iter()
        .map(|s| encode_history(config, &s.triples))
        .collect::<Result<Vec<TokenSequence>>>()?;
    let refs: Vec<&TokenSequence> = tokens.iter().collect();
    let logits = build_logits(graph, vars, config, &refs)?;
    let winners: Vec<usize> = triples.iter().map(|t| t.winner.index()).collect();
    let losers: Vec<usize> = triples.iter().map(|t| t.loser.index()).collect();
    Ok(dpo_term_mean(graph, logits, &winners, &losers, reference, beta))
}

/// Standard DPO loss: every triple scored with an empty history.
pub fn standard_dpo_loss(
    graph: &mut Graph<'_>,
    vars: &ParamVars,
    config: &ModelConfig,
    reference: &ReferencePolicy,
    batch: &[&PreferenceTriple],
    beta: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    check_actions(batch, reference)?;
    let tokens = batch
        .iter()
        .map(|t| encode_sequence(config, &[&t.x], &[]))
        .collect::<Result<Vec<TokenSequence>>>()?;
    let refs: Vec<&TokenSequence> = tokens.iter().collect();
    let logits = build_logits(graph, vars, config, &refs)?;
    let winners: Vec<usize> = batch.iter().map(|t| t.winner.index()).collect();
    let losers: Vec<usize> = batch.iter().map(|t| t.loser.index()).collect();
    Ok(dpo_term_mean(graph, logits, &winners, &losers, reference, beta))
}

pub fn history_dpo_loss_value(
    params: &PolicyParams,
    config: &ModelConfig,
    reference: &ReferencePolicy,
    batch: &[&HistorySequence],
    beta: f64,
) -> Result<f64> {
    value_only(params, |g, vars| history_dpo_loss(g, vars, config, reference, batch, beta))
}

pub fn standard_dpo_loss_value(
    params: &PolicyParams,
    config: &ModelConfig,
    reference: &ReferencePolicy,
    batch: &[&PreferenceTriple],
    beta: f64,
) -> Result<f64> {
    value_only(params, |g, vars| standard_dpo_loss(g, vars, config, reference, batch, beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss over the whole training set after the last update, groups weighted equally.
    pub final_loss: f64,
    pub steps: usize,
    pub wall_clock_secs: f64,
    pub model: ModelConfig,
    pub dpo: DpoConfig,
}

/// Group-balanced batches: slots cycle through the groups round-robin, and a
/// group that runs out of histories wraps around to its first, so every group
/// fills the same number of slots per epoch.
pub fn balanced_batches(dataset: &OfflineDataset, batch_size: usize) -> Vec<Vec<&HistorySequence>> {
    let queues: Vec<&[HistorySequence]> = dataset
        .groups
        .iter()
        .map(|g| g.sequences.as_slice())
        .filter(|s| !s.is_empty())
        .collect();
    let longest = queues.iter().map(|q| q.len()).max().unwrap_or(0);
    let mut slots = Vec::with_capacity(longest * queues.len());
    for i in 0..longest {
        for q in &queues {
            slots.push(&q[i % q.len()]);
        }
    }
    slots.chunks(batch_size.max(1)).map(<[&HistorySequence]>::to_vec).collect()
}

/// Loss over every full history of `dataset`, each group weighted `1/K`.
pub fn dataset_history_loss(params: &PolicyParams, config: &ModelConfig, dataset: &OfflineDataset, beta: f64) -> Result<f64> {
    let reference = ReferencePolicy::uniform(config.num_actions);
    let mut group_means = Vec::new();
    for g in &dataset.groups {
        if g.sequences.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for chunk in g.sequences.chunks(32) {
            let refs: Vec<&HistorySequence> = chunk.iter().collect();
            total += history_dpo_loss_value(params, config, &reference, &refs, beta)? * chunk.len() as f64;
        }
        group_means.push(total / g.sequences.len() as f64);
    }
    if group_means.is_empty() {
        return Err(Error::invalid("dataset holds no histories"));
    }
    Ok(group_means.iter().sum::<f64>() / group_means.len() as f64)
}

/// Mean standard-DPO loss over `triples`.
pub fn triples_loss(params: &PolicyParams, config: &ModelConfig, triples: &[PreferenceTriple], beta: f64) -> Result<f64> {
    let reference = ReferencePolicy::uniform(config.num_actions);
    if triples.is_empty() {
        return Err(Error::invalid("no triples"));
    }
    let mut total = 0.0;
    for chunk in triples.chunks(256) {
        let refs: Vec<&PreferenceTriple> = chunk.iter().collect();
        total += standard_dpo_loss_value(params, config, &reference, &refs, beta)? * chunk.len() as f64;
    }
    Ok(total / triples.len() as f64)
}

fn check_trainable(dataset: &OfflineDataset, model: &ModelConfig, dpo: &DpoConfig) -> Result<()> {
    model.validate()?;
    dpo.validate()?;
    if dataset.groups.is_empty() {
        return Err(Error::invalid("dataset has no groups"));
    }
    if let Some(g) = dataset.groups.iter().position(|g| g.sequences.is_empty()) {
        return Err(Error::invalid(format!("group {g} has no full history")));
    }
    if dataset.horizon() > model.max_positions {
        return Err(Error::invalid(format!(
            "history length {} exceeds max_positions = {}",
            dataset.horizon(),
            model.max_positions
        )));
    }
    Ok(())
}

/// Trains the history-conditioned policy. `on_epoch(epoch, mean_loss)` is
/// called after every epoch.
pub fn train_ppt_with(
    rng: &Rng,
    dataset: &OfflineDataset,
    model: &ModelConfig,
    dpo: &DpoConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(PolicyParams, TrainReport)> {
    check_trainable(dataset, model, dpo)?;
    let start = Instant::now();
    let reference = ReferencePolicy::uniform(model.num_actions);
    let mut params = init_params(&rng.fork("model"), model)?;
    let mut opt = OptState::new(&params, dpo.adam());

    let first = balanced_batches(dataset, dpo.batch_size);
    let initial_loss = history_dpo_loss_value(&params, model, &reference, &first[0], dpo.beta)?;

    let mut epoch_losses = Vec::with_capacity(dpo.epochs);
    let mut steps = 0;
    let mut current = dataset.clone();
    for epoch in 0..dpo.epochs {
        current = reshuffle_epoch(&rng.fork(&format!("epoch/{epoch}")), &current);
        let mut sum = 0.0;
        let batches = balanced_batches(&current, dpo.batch_size);
        for batch in &batches {
            let (loss, grads) = value_and_grad(&params, |g, vars| history_dpo_loss(g, vars, model, &reference, batch, dpo.beta))?;
            adam_step(&mut params, &grads, &mut opt)?;
            sum += loss;
            steps += 1;
        }
        let mean = sum / batches.len() as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    let final_loss = dataset_history_loss(&params, model, &current, dpo.beta)?;
    Ok((
        params,
        TrainReport {
            label: "ppt".into(),
            initial_loss,
            epoch_losses,
            final_loss,
            steps,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            model: model.clone(),
            dpo: dpo.clone(),
        },
    ))
}

pub fn train_ppt(rng: &Rng, dataset: &OfflineDataset, model: &ModelConfig, dpo: &DpoConfig) -> Result<(PolicyParams, TrainReport)> {
    train_ppt_with(rng, dataset, model, dpo, |_, _| {})
}

/// Trains one history-free model per group on that group's triples only.
///
/// All models start from the same initialization so that their weights can
/// be meaningfully interpolated.
pub fn train_ps_models_with(
    rng: &Rng,
    dataset: &OfflineDataset,
    model: &ModelConfig,
    dpo: &DpoConfig,
    mut on_epoch: impl FnMut(usize, usize, f64),
) -> Result<(Vec<PolicyParams>, Vec<TrainReport>)> {
    model.validate()?;
    dpo.validate()?;
    if let Some(g) = dataset.groups.iter().position(|g| g.num_triples() == 0) {
        return Err(Error::invalid(format!("group {g} has no triples")));
    }
    if dataset.groups.is_empty() {
        return Err(Error::invalid("dataset has no groups"));
    }
    let reference = ReferencePolicy::uniform(model.num_actions);
    let init = init_params(&rng.fork("model"), model)?;
    let mut models = Vec::with_capacity(dataset.groups.len());
    let mut reports = Vec::with_capacity(dataset.groups.len());
    for (g, data) in dataset.groups.iter().enumerate() {
        let start = Instant::now();
        let mut pool: Vec<PreferenceTriple> = data.triples().cloned().collect();
        let mut params = init.clone();
        let mut opt = OptState::new(&params, dpo.adam());
        let first: Vec<&PreferenceTriple> = pool.iter().take(dpo.ps_batch_size).collect();
        let initial_loss = standard_dpo_loss_value(&params, model, &reference, &first, dpo.beta)?;
        let mut epoch_losses = Vec::with_capacity(dpo.epochs);
        let mut steps = 0;
        for epoch in 0..dpo.epochs {
            rng.fork(&format!("group/{g}/epoch/{epoch}")).shuffle(&mut pool);
            let mut sum = 0.0;
            let mut n = 0;
            for chunk in pool.chunks(dpo.ps_batch_size) {
                let batch: Vec<&PreferenceTriple> = chunk.iter().collect();
                let (loss, grads) =
                    value_and_grad(&params, |gr, vars| standard_dpo_loss(gr, vars, model, &reference, &batch, dpo.beta))?;
                adam_step(&mut params, &grads, &mut opt)?;
                sum += loss;
                n += 1;
                steps += 1;
            }
            let mean = sum / n as f64;
            on_epoch(g, epoch, mean);
            epoch_losses.push(mean);
        }
        let final_loss = triples_loss(&params, model, &pool, dpo.beta)?;
        reports.push(TrainReport {
            label: format!("ps-group{}", g + 1),
            initial_loss,
            epoch_losses,
            final_loss,
            steps,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            model: model.clone(),
            dpo: dpo.clone(),
        });
        models.push(params);
    }
    Ok((models, reports))
}

pub fn train_ps_models(rng: &Rng, dataset: &OfflineDataset, model: &ModelConfig, dpo: &DpoConfig) -> Result<Vec<PolicyParams>> {
    Ok(train_ps_models_with(rng, dataset, model, dpo, |_, _, _| {})?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_offline;
    use crate::env::{ActionId, Context, EnvSpec};
    use crate::numcore::Array;
    use std::f64::consts::LN_2;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            max_positions: 16,
            ..ModelConfig::default()
        }
    }

    /// A model whose output ignores its input: hidden state zeroed by a zero
    /// layer-norm gain, so the head bias alone sets the logits.
    fn constant_policy(config: &ModelConfig, probs: &[f64]) -> PolicyParams {
        let mut p = init_params(&Rng::new(0), config).unwrap();
        p.get_mut("ln_f.g").unwrap().data_mut().fill(0.0);
        let logits: Vec<f64> = probs.iter().map(|q| q.ln()).collect();
        *p.get_mut("head.b").unwrap() = Array::new(vec![probs.len()], logits).unwrap();
        p
    }

    fn triple(w: usize, l: usize) -> PreferenceTriple {
        PreferenceTriple::new(Context::new(vec![0.2, 0.4, 0.6]).unwrap(), ActionId(w), ActionId(l)).unwrap()
    }

    #[test]
    fn zero_head_loss_is_ln2() {
        let c = tiny();
        let ds = generate_offline(&Rng::new(1), &EnvSpec::default(), 60, &[1.0, 0.8, 0.6], 15).unwrap();
        let p = init_params(&Rng::new(3), &c).unwrap();
        let r = ReferencePolicy::uniform(4);
        let batch: Vec<&HistorySequence> = ds.groups.iter().flat_map(|g| g.sequences.iter()).collect();
        let loss = history_dpo_loss_value(&p, &c, &r, &batch, 1.0).unwrap();
        assert!((loss - LN_2).abs() < 1e-12);
        let t: Vec<&PreferenceTriple> = ds.groups[0].triples().collect();
        assert!((standard_dpo_loss_value(&p, &c, &r, &t, 1.0).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_terms() {
        // p = (0.4, 0.2, 0.2, 0.2): σ(ln 2) = 2/3 and σ(2 ln 2) = 4/5.
        let c = tiny();
        let p = constant_policy(&c, &[0.4, 0.2, 0.2, 0.2]);
        let r = ReferencePolicy::uniform(4);
        let t = triple(0, 1);
        let l1 = standard_dpo_loss_value(&p, &c, &r, &[&t], 1.0).unwrap();
        assert!((l1 - (1.5f64).ln()).abs() < 1e-12, "{l1}");
        let l2 = standard_dpo_loss_value(&p, &c, &r, &[&t], 2.0).unwrap();
        assert!((l2 - (1.25f64).ln()).abs() < 1e-12, "{l2}");
    }

    #[test]
    fn non_uniform_reference_two_term_form() {
        let c = tiny();
        let probs = [0.4, 0.3, 0.2, 0.1];
        let p = constant_policy(&c, &probs);
        let refp = [0.1, 0.2, 0.3, 0.4];
        let r = ReferencePolicy::new(refp.to_vec()).unwrap();
        let t = triple(1, 3);
        let beta = 0.7;
        let z = beta * (probs[1] / refp[1]).ln() - beta * (probs[3] / refp[3]).ln();
        let expected = -(1.0 / (1.0 + (-z).exp())).ln();
        let got = standard_dpo_loss_value(&p, &c, &r, &[&t], beta).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_triple_has_same_mean() {
        let c = tiny();
        let mut p = init_params(&Rng::new(4), &c).unwrap();
        let mut rng = Rng::new(9);
        for v in p.get_mut("head.w").unwrap().data_mut() {
            *v = rng.gaussian(0.0, 0.5);
        }
        let r = ReferencePolicy::uniform(4);
        let t = triple(2, 0);
        let once = standard_dpo_loss_value(&p, &c, &r, &[&t], 1.0).unwrap();
        let many = standard_dpo_loss_value(&p, &c, &r, &[&t, &t, &t, &t, &t], 1.0).unwrap();
        assert!((once - many).abs() < 1e-14);
    }

    #[test]
    fn balanced_batches_fill_groups_equally() {
        let ds = generate_offline(&Rng::new(1), &EnvSpec::default(), 500, &[1.0, 0.8, 0.6], 15).unwrap();
        let batches = balanced_batches(&ds, 16);
        assert_eq!(batches.len(), 7);
        let mut counts = [0usize; 3];
        for b in &batches {
            for s in b {
                counts[s.group] += 1;
            }
        }
        assert_eq!(counts, [33, 33, 33]);
    }

    #[test]
    fn empty_group_is_rejected_for_training() {
        let mut ds = generate_offline(&Rng::new(1), &EnvSpec::default(), 60, &[1.0, 0.8, 0.6], 15).unwrap();
        ds.groups[2].sequences.clear();
        assert!(train_ppt(&Rng::new(1), &ds, &tiny(), &DpoConfig::default()).is_err());
    }
}
