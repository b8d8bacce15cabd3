//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::array::{GradStore, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer moments, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step_count: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
    pub hyper: AdamConfig,
}

impl OptState {
    pub fn new(params: &ParamStore, hyper: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            hyper,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut ParamStore, grads: &GradStore, state: &mut OptState) -> Result<()> {
    params.check_same_layout(grads.as_store())?;
    params
        .check_same_layout(&state.first_moment)
        .and_then(|_| params.check_same_layout(&state.second_moment))
        .map_err(|e| Error::Shape(format!("optimizer state: {e}")))?;

    state.step_count += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.hyper;
    let t = state.step_count as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let p = p.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite { name: name.to_string() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::array::Array;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Array::scalar(v)).unwrap();
        s
    }

    fn grads_for(params: &ParamStore, g: f64) -> GradStore {
        GradStore::from_parts(params, scalar_store(g)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_store(1.25);
        let mut st = OptState::new(&p, AdamConfig::default());
        let g = grads_for(&p, 0.0);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut p = scalar_store(0.0);
        let hyper = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut st = OptState::new(&p, hyper);
        let g = grads_for(&p, 1.0);
        adam_step(&mut p, &g, &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = scalar_store(0.3);
            let mut st = OptState::new(&p, AdamConfig::default());
            for i in 0..50 {
                let g = grads_for(&p, (i as f64 * 0.37).sin());
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar_store(0.0);
        let mut st = OptState::new(&p, AdamConfig::default());
        let mut other = ParamStore::new();
        other.insert("w", Array::zeros(&[2])).unwrap();
        let mut wrong = OptState::new(&other, AdamConfig::default());
        let g = grads_for(&p, 1.0);
        assert!(adam_step(&mut p, &g, &mut wrong).is_err());
        assert!(adam_step(&mut p, &g, &mut st).is_ok());
    }
}
