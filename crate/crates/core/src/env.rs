//! The ground-truth preference world.
//!
//! Contexts are points of the unit cube. A linear encoder maps each context to
//! a feature vector, and every group scores action `a` by the dot product of
//! those features with a column whose entries all equal the group's table
//! value for `a`. Annotators follow a Bradley–Terry model over these rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// A question, as a point of `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(pub Vec<f64>);

impl Context {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!("context {coords:?} leaves the unit cube")));
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One of the discrete responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user's mixture over the preference groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    weights: Vec<f64>,
}

const SIMPLEX_TOL: f64 = 1e-9;

impl UserProfile {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("profile weights {weights:?} must be non-negative")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("profile weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// The vertex of the simplex for group `group` (0-based).
    pub fn pure(group: usize, num_groups: usize) -> Self {
        assert!(group < num_groups, "group {group} out of range {num_groups}");
        let mut weights = vec![0.0; num_groups];
        weights[group] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_groups(&self) -> usize {
        self.weights.len()
    }

    /// The group index if this profile is a simplex vertex.
    pub fn pure_group(&self) -> Option<usize> {
        let mut hot = None;
        for (g, &w) in self.weights.iter().enumerate() {
            if w == 1.0 {
                hot = Some(g);
            } else if w != 0.0 {
                return None;
            }
        }
        hot
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub num_groups: usize,
    pub num_actions: usize,
    pub context_dim: usize,
    /// Encoder rows: feature `i` is `Σ_j encoder_matrix[i][j]·x_j + encoder_bias[i]`.
    pub encoder_matrix: Vec<Vec<f64>>,
    pub encoder_bias: Vec<f64>,
    /// `reward_table[g][a]`: the value every feature weight of group `g` takes for action `a`.
    pub reward_table: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            num_groups: 3,
            num_actions: 4,
            context_dim: 3,
            encoder_matrix: vec![vec![1.0 / 6.0; 3]; 4],
            encoder_bias: vec![0.0; 4],
            reward_table: vec![
                vec![7.0, 5.0, 3.0, 1.0],
                vec![1.0, 7.0, 5.0, 3.0],
                vec![3.0, 1.0, 7.0, 5.0],
            ],
            noise_sigma: 0.01,
        }
    }
}

fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_groups;
        let a = self.num_actions;
        if k == 0 {
            return Err(Error::config("env.num_groups", "must be at least 1"));
        }
        if a < 2 {
            return Err(Error::config("env.num_actions", "must be at least 2"));
        }
        if self.context_dim == 0 {
            return Err(Error::config("env.context_dim", "must be at least 1"));
        }
        if self.encoder_matrix.is_empty()
            || self
                .encoder_matrix
                .iter()
                .any(|row| row.len() != self.context_dim || row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::config(
                "env.encoder_matrix",
                format!("must be finite rows of length context_dim = {}", self.context_dim),
            ));
        }
        if self.encoder_bias.len() != self.encoder_matrix.len() || self.encoder_bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("env.encoder_bias", "must match the encoder's output size"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("env.noise_sigma", "must be finite and >= 0"));
        }
        if self.reward_table.len() != k {
            return Err(Error::config("env.reward_table", format!("must have num_groups = {k} rows")));
        }
        let levels: Vec<f64> = (0..a).map(|i| (2 * i + 1) as f64).collect();
        for (g, row) in self.reward_table.iter().enumerate() {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted != levels {
                return Err(Error::config(
                    "env.reward_table",
                    format!("row {g} must be a permutation of {levels:?}"),
                ));
            }
        }
        for g in 0..k {
            for h in (g + 1)..k {
                if self.reward_table[g] == self.reward_table[h] {
                    return Err(Error::config("env.reward_table", format!("rows {g} and {h} coincide")));
                }
                if self.group_best_action(g) == self.group_best_action(h) {
                    return Err(Error::config(
                        "env.reward_table",
                        format!("groups {g} and {h} share a best action"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoder_matrix.len()
    }

    fn group_best_action(&self, g: usize) -> usize {
        argmax_lowest(self.reward_table[g].iter().copied())
    }

    /// Σ_g weights[g]·R[g][action].
    pub fn table_value(&self, user: &UserProfile, action: ActionId) -> f64 {
        user.weights()
            .iter()
            .zip(&self.reward_table)
            .map(|(w, row)| w * row[action.index()])
            .sum()
    }

    /// The action with the highest mixture-weighted table value (ties → lowest index).
    pub fn best_action(&self, user: &UserProfile) -> ActionId {
        ActionId(argmax_lowest((0..self.num_actions).map(|a| self.table_value(user, ActionId(a)))))
    }
}

/// A context drawn uniformly from the unit cube.
pub fn sample_context(rng: &mut Rng, spec: &EnvSpec) -> Context {
    Context((0..spec.context_dim).map(|_| rng.unit()).collect())
}

/// The encoder output `W·x + b`.
pub fn encode_context(spec: &EnvSpec, x: &Context) -> Vec<f64> {
    spec.encoder_matrix
        .iter()
        .zip(&spec.encoder_bias)
        .map(|(row, b)| row.iter().zip(x.coords()).map(|(w, xi)| w * xi).sum::<f64>() + b)
        .collect()
}

/// `1ᵀ·encode(x)`, the factor every table value is scaled by.
pub fn context_scale(spec: &EnvSpec, x: &Context) -> f64 {
    encode_context(spec, x).iter().sum()
}

/// Reward of `action` at `x` for `user`, plus an externally drawn noise term.
pub fn reward(spec: &EnvSpec, user: &UserProfile, action: ActionId, x: &Context, noise_sample: f64) -> f64 {
    let features = encode_context(spec, x);
    let a = action.index();
    let mixed: f64 = user
        .weights()
        .iter()
        .zip(&spec.reward_table)
        .map(|(w, row)| {
            // θ_g(a) has every component equal to R[g][a].
            let column_dot: f64 = features.iter().map(|f| f * row[a]).sum();
            w * column_dot
        })
        .sum();
    mixed + noise_sample
}

/// Bradley–Terry probability that `r1` beats `r2`, written so that swapping
/// the arguments gives exactly `1 − p`.
pub fn bradley_terry(r1: f64, r2: f64) -> f64 {
    let d = r1 - r2;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        1.0 - 1.0 / (1.0 + d.exp())
    }
}

fn check_pair(spec: &EnvSpec, a1: ActionId, a2: ActionId) -> Result<()> {
    if a1 == a2 {
        return Err(Error::invalid(format!("cannot compare action {} with itself", a1.0)));
    }
    for a in [a1, a2] {
        if a.index() >= spec.num_actions {
            return Err(Error::invalid(format!("action {} out of range", a.0)));
        }
    }
    Ok(())
}

/// Probability that `user` prefers `a1` over `a2` at `x`, on noiseless rewards.
pub fn preference_prob(spec: &EnvSpec, user: &UserProfile, a1: ActionId, a2: ActionId, x: &Context) -> Result<f64> {
    check_pair(spec, a1, a2)?;
    Ok(bradley_terry(reward(spec, user, a1, x, 0.0), reward(spec, user, a2, x, 0.0)))
}

/// One annotation: noisy rewards for both candidates, then a Bradley–Terry
/// draw. Returns `(winner, loser)`.
pub fn sample_preference(
    rng: &mut Rng,
    spec: &EnvSpec,
    user: &UserProfile,
    a1: ActionId,
    a2: ActionId,
    x: &Context,
) -> Result<(ActionId, ActionId)> {
    check_pair(spec, a1, a2)?;
    let n1 = rng.gaussian(0.0, spec.noise_sigma);
    let n2 = rng.gaussian(0.0, spec.noise_sigma);
    let p = bradley_terry(reward(spec, user, a1, x, n1), reward(spec, user, a2, x, n2));
    if rng.unit() < p {
        Ok((a1, a2))
    } else {
        Ok((a2, a1))
    }
}

/// A user drawn uniformly from the simplex over `num_groups` groups.
pub fn sample_mixed_user(rng: &mut Rng, num_groups: usize) -> Result<UserProfile> {
    UserProfile::new(rng.dirichlet_uniform(num_groups)?)
}
