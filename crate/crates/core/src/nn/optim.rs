use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Gradients, ParamStore};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates and step counter for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

/// One AdamW update with decoupled weight decay:
/// `w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
///
/// Parameters without a gradient are left untouched.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, store has {}, gradients cover {}",
            state.first.len(),
            store.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(grad) = grads.get(id) else { continue };
        let i = id.index();
        let param = store.get_mut(id).data_mut();
        if grad.len() != param.len() {
            return Err(Error::shape(format!(
                "gradient for tensor {i} has {} entries, parameter has {}",
                grad.len(),
                param.len()
            )));
        }
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for k in 0..param.len() {
            let g = grad[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            param[k] -= lr * weight_decay * param[k];
            param[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::nn::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(values));
        s
    }

    fn grads_for(store: &ParamStore, scale: &[f64]) -> Gradients {
        // gradient of sum(scale * w) is `scale`
        let mut g = Graph::new(store);
        let w = g.param(store.id("w").unwrap());
        let c = g.constant(Tensor::row(scale.to_vec()));
        let p = g.mul(w, c);
        let s = g.sum_all(p);
        g.backward(s).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut store = store_with(vec![0.5, -2.0]);
        let grads = grads_for(&store, &[0.0, 0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimizerState::new(&store, cfg);
        adamw_step(&mut store, &grads, &mut state).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).data(), &[0.5, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = store_with(vec![1.0, 1.0, 1.0]);
        let grads = grads_for(&store, &[3.0, -0.25, 1e-3]);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimizerState::new(&store, cfg);
        adamw_step(&mut store, &grads, &mut state).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let w = store.get(store.id("w").unwrap()).data();
        for (&wk, gk) in w.iter().zip([3.0f64, -0.25, 1e-3]) {
            let expected = 1.0 - 0.01 * gk / (gk.abs() + 1e-8);
            assert!((wk - expected).abs() < 1e-12);
            assert!(((1.0 - wk) - 0.01 * gk.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut store = store_with(vec![2.0, -4.0]);
        let grads = grads_for(&store, &[0.0, 0.0]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut state = OptimizerState::new(&store, cfg);
        adamw_step(&mut store, &grads, &mut state).unwrap();
        let w = store.get(store.id("w").unwrap()).data();
        assert!((w[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((w[1] + 4.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = store_with(vec![0.3, 0.7]);
        let grads = grads_for(&store, &[5.0, -5.0]);
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut state = OptimizerState::new(&store, cfg);
        for _ in 0..3 {
            adamw_step(&mut store, &grads, &mut state).unwrap();
        }
        assert_eq!(store.get(store.id("w").unwrap()).data(), &[0.3, 0.7]);
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let store = store_with(vec![0.0; 4]);
        let state = OptimizerState::new(&store, AdamWConfig::default());
        assert_eq!(state.first_moment(0).len(), 4);
        assert_eq!(state.second_moment(0).len(), 4);
    }
}
