use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One update of every parameter in `store` from `grads` (same order).
    pub fn step(&self, store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    store.len(),
                    grads.len(),
                    state.m.len()
                ),
            ));
        }
        for (k, id) in store.ids().enumerate() {
            let shape = store.get(id).shape();
            if grads[k].shape() != shape || state.m[k].shape() != shape || state.v[k].shape() != shape {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {} expects {shape:?}", store.param(id).name),
                ));
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, id) in store.ids().enumerate() {
            let g = grads[k].data();
            let m = state.m[k].data_mut();
            let v = state.v[k].data_mut();
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[vec![1.5, -2.0]]), true);
        let before = store.clone();
        let mut st = AdamState::new(&store);
        for _ in 0..5 {
            Adam::default()
                .step(&mut store, &[Tensor::zeros(1, 2)], &mut st)
                .unwrap();
        }
        assert_eq!(store, before);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(0.0), true);
        let mut st = AdamState::new(&store);
        Adam::with_lr(0.01)
            .step(&mut store, &[Tensor::scalar(1.0)], &mut st)
            .unwrap();
        // m̂ = g, v̂ = g², so Δθ = -lr * g / (|g| + eps).
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
        assert!((store.get(id).item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(2, 2), true);
        let mut st = AdamState::new(&store);
        let r = Adam::default().step(&mut store, &[Tensor::zeros(1, 2)], &mut st);
        assert!(matches!(r, Err(Error::Shape { .. })));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::from_rows(&[vec![0.3, -0.7, 1.1]]), true);
            let mut st = AdamState::new(&store);
            for k in 0..50 {
                let g = store.get(id).map(|x| 2.0 * x + 0.1 * k as f64);
                Adam::default().step(&mut store, &[g], &mut st).unwrap();
            }
            store.get(id).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
