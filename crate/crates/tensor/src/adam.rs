use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for a fixed list of parameter shapes.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        let second = first.clone();
        AdamState {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        Self::new(config, store.iter().map(|(_, p)| p.value.shape()))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` given `grads`.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                left: vec![self.first.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    /// Updates every parameter of `store` from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        let grads: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();
        let mut values: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
        {
            let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
            let grefs: Vec<&Tensor> = grads.iter().collect();
            self.apply(&mut refs, &grefs)?;
        }
        for (id, v) in ids.into_iter().zip(values) {
            *store.value_mut(id) = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new(AdamConfig::default(), [p.shape()]);
        state.apply(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let config = AdamConfig {
            epsilon: 0.0,
            ..AdamConfig::with_learning_rate(0.01)
        };
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![4.0, -0.001, 250.0]).unwrap();
        let mut state = AdamState::new(config, [p.shape()]);
        state.apply(&mut [&mut p], &[&g]).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            assert!((pv + 0.01 * gv.signum()).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_converges() {
        // loss (x − 3)², gradient 2(x − 3)
        let mut x = Tensor::scalar(0.0);
        let mut state = AdamState::new(AdamConfig::with_learning_rate(0.1), [x.shape()]);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (x.item() - 3.0));
            state.apply(&mut [&mut x], &[&g]).unwrap();
        }
        assert!((x.item() - 3.0).abs() < 0.05, "x = {}", x.item());
        assert_eq!(state.step_count(), 200);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), [p.shape()]);
        assert!(state.apply(&mut [&mut p], &[&g]).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
