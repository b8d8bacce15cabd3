//! Personalized soups: convex weight interpolation of per-group models and
//! online selection of the interpolate whose predictions best explain the
//! user's observed choices.
//!
//! Interpolated models are materialized one at a time on demand. Holding a
//! hundred full-size models at once would take several gigabytes, and
//! interpolating logits instead of weights would not give the same model.

use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Context};
use crate::error::{Error, Result};
use crate::model::{policy_batch, ModelConfig, PolicyParams};
use crate::numcore::{Array, ParamStore, Rng};

const SIMPLEX_TOL: f64 = 1e-9;

/// Elementwise `Σ_g weights[g]·models[g]`.
///
/// A one-hot weight vector returns an exact copy of that model.
pub fn interpolate(models: &[&ParamStore], weights: &[f64]) -> Result<ParamStore> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::invalid(format!("{} models for {} weights", models.len(), weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("weights {weights:?} are not on the simplex")));
    }
    for m in &models[1..] {
        models[0].check_same_layout(m)?;
    }
    if let Some(vertex) = weights.iter().position(|&w| w == 1.0) {
        return Ok(models[vertex].clone());
    }
    let mut out = ParamStore::new();
    for (name, first) in models[0].iter() {
        let mut data = vec![0.0; first.len()];
        for (m, &w) in models.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let src = m.get(name).expect("layouts checked").data();
            for (d, s) in data.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        out.insert(name, Array::new(first.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// The per-group base models and the interpolation weights of every member.
#[derive(Debug, Clone)]
pub struct SoupEnsemble {
    pub base_models: Vec<PolicyParams>,
    pub weight_vectors: Vec<Vec<f64>>,
}

impl SoupEnsemble {
    pub fn new(base_models: Vec<PolicyParams>, weight_vectors: Vec<Vec<f64>>) -> Result<Self> {
        if base_models.is_empty() {
            return Err(Error::invalid("ensemble needs at least one base model"));
        }
        for m in &base_models[1..] {
            base_models[0].check_same_layout(m)?;
        }
        let k = base_models.len();
        for w in &weight_vectors {
            if w.len() != k || w.iter().any(|x| *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!("weight vector {w:?} is not on the {k}-simplex")));
            }
        }
        Ok(Self {
            base_models,
            weight_vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.weight_vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight_vectors.is_empty()
    }

    /// Materializes member `i`.
    pub fn member(&self, i: usize) -> Result<ParamStore> {
        let refs: Vec<&ParamStore> = self.base_models.iter().collect();
        interpolate(&refs, &self.weight_vectors[i])
    }
}

/// The `K` vertices followed by `size − K` uniform draws from the simplex.
pub fn build_ensemble(rng: &Rng, base_models: Vec<PolicyParams>, size: usize) -> Result<SoupEnsemble> {
    let k = base_models.len();
    if size < k {
        return Err(Error::invalid(format!("ensemble size {size} is below the {k} vertices")));
    }
    let mut draws = rng.fork("soup-weights");
    let mut weights: Vec<Vec<f64>> = (0..k)
        .map(|g| {
            let mut w = vec![0.0; k];
            w[g] = 1.0;
            w
        })
        .collect();
    for _ in k..size {
        weights.push(draws.dirichlet_uniform(k)?);
    }
    SoupEnsemble::new(base_models, weights)
}

/// Cumulative winner log-likelihood of every member and the current leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub cumulative_scores: Vec<f64>,
    pub best_index: usize,
}

/// Index of the largest score, ties to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Zero scores and a uniformly random starting member.
pub fn init_selection(rng: &mut Rng, size: usize) -> Result<SelectionState> {
    if size == 0 {
        return Err(Error::invalid("cannot select from an empty ensemble"));
    }
    Ok(SelectionState {
        cumulative_scores: vec![0.0; size],
        best_index: rng.below(size),
    })
}

impl SelectionState {
    /// Adds one turn of per-member winner log-probabilities and re-selects.
    pub fn apply_scores(&self, log_probs: &[f64]) -> Result<SelectionState> {
        if log_probs.len() != self.cumulative_scores.len() {
            return Err(Error::Shape(format!(
                "{} log-probabilities for {} members",
                log_probs.len(),
                self.cumulative_scores.len()
            )));
        }
        let cumulative_scores: Vec<f64> = self.cumulative_scores.iter().zip(log_probs).map(|(s, l)| s + l).collect();
        if cumulative_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                name: "selection scores".into(),
            });
        }
        let best_index = argmax_lowest(&cumulative_scores);
        Ok(SelectionState {
            cumulative_scores,
            best_index,
        })
    }
}

/// `log M_i(winner | x)` with an empty history, for each of several turns.
pub fn winner_log_probs(params: &PolicyParams, config: &ModelConfig, turns: &[(Context, ActionId)]) -> Result<Vec<f64>> {
    let queries: Vec<Context> = turns.iter().map(|(x, _)| x.clone()).collect();
    let dists = policy_batch(params, config, &[], &queries)?;
    Ok(dists.iter().zip(turns).map(|(d, (_, w))| d[w.index()].ln()).collect())
}

/// One selection step: score every member on `(x_val, winner)` and re-select.
pub fn ps_select_step(
    state: &SelectionState,
    ensemble: &SoupEnsemble,
    config: &ModelConfig,
    x_val: &Context,
    winner: ActionId,
) -> Result<SelectionState> {
    if state.cumulative_scores.len() != ensemble.len() {
        return Err(Error::Shape("selection state does not match the ensemble".into()));
    }
    let turn = [(x_val.clone(), winner)];
    let mut log_probs = Vec::with_capacity(ensemble.len());
    for i in 0..ensemble.len() {
        let member = ensemble.member(i)?;
        log_probs.push(winner_log_probs(&member, config, &turn)?[0]);
    }
    state.apply_scores(&log_probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Array::scalar(v)).unwrap();
        s
    }

    #[test]
    fn hand_interpolation() {
        let a = scalar(2.0);
        let b = scalar(4.0);
        let out = interpolate(&[&a, &b], &[0.25, 0.75]).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[3.5]);
    }

    #[test]
    fn vertex_is_exact_copy() {
        let a = scalar(0.1);
        let b = scalar(1.0 / 3.0);
        let out = interpolate(&[&a, &b], &[0.0, 1.0]).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn invalid_weights_and_layouts() {
        let a = scalar(1.0);
        let mut b = ParamStore::new();
        b.insert("v", Array::scalar(1.0)).unwrap();
        assert!(interpolate(&[&a, &b], &[0.5, 0.5]).is_err());
        assert!(interpolate(&[&a, &a], &[0.5, 0.6]).is_err());
        assert!(interpolate(&[&a, &a], &[1.0]).is_err());
    }

    #[test]
    fn identical_models_ignore_weights() {
        let a = scalar(0.7);
        let out = interpolate(&[&a, &a, &a], &[0.2, 0.3, 0.5]).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn ensemble_starts_with_vertices() {
        let models = vec![scalar(1.0), scalar(2.0), scalar(3.0)];
        let e = build_ensemble(&Rng::new(1), models.clone(), 3).unwrap();
        assert_eq!(e.len(), 3);
        for g in 0..3 {
            assert_eq!(e.member(g).unwrap(), models[g]);
        }
        let e = build_ensemble(&Rng::new(1), models.clone(), 100).unwrap();
        assert_eq!(e.len(), 100);
        assert_eq!(&e.weight_vectors[..3], &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        for w in &e.weight_vectors {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(build_ensemble(&Rng::new(1), models, 2).is_err());
    }

    #[test]
    fn selection_init() {
        let mut r = Rng::new(3);
        let s = init_selection(&mut r, 1).unwrap();
        assert_eq!(s.best_index, 0);
        let s = init_selection(&mut r, 100).unwrap();
        assert!(s.cumulative_scores.iter().all(|&x| x == 0.0));
        assert!(init_selection(&mut r, 0).is_err());
    }

    #[test]
    fn ties_keep_lowest_index() {
        let s = SelectionState {
            cumulative_scores: vec![0.0; 4],
            best_index: 3,
        };
        let s = s.apply_scores(&[-1.0, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(s.best_index, 0);
        let s = s.apply_scores(&[-2.0, -0.5, -0.5, -3.0]).unwrap();
        assert_eq!(s.best_index, 1);
    }
}
