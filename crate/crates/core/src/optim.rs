//! Bias-corrected Adam over a [`ParamStore`].

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::layers::ParamStore;
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamMoments {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamMoments {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// A non-finite gradient entry; training aborts with this diagnostic.
    NonFiniteGradient { param: String },
    GradientCount { expected: usize, got: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter {param}")
            }
            OptimError::GradientCount { expected, got } => {
                write!(f, "expected {expected} gradient tensors, got {got}")
            }
        }
    }
}

impl core::error::Error for OptimError {}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    moments: AdamMoments,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, moments: AdamMoments) -> Self {
        let m = store
            .ids()
            .map(|id| {
                let (r, c) = store.tensor(id).shape();
                Tensor::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            learning_rate,
            moments,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter; `grads` is indexed by `ParamId`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), OptimError> {
        if grads.len() != self.m.len() {
            return Err(OptimError::GradientCount {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        for (id, grad) in store.ids().zip(grads) {
            if !grad.all_finite() {
                return Err(OptimError::NonFiniteGradient {
                    param: String::from(store.name(id)),
                });
            }
        }
        self.step += 1;
        let b1 = self.moments.beta1;
        let b2 = self.moments.beta2;
        let bias1 = 1.0 - math::powi(b1, self.step as i32);
        let bias2 = 1.0 - math::powi(b2, self.step as i32);
        for (idx, id) in store.ids().enumerate() {
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let theta = store.tensor_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -=
                    self.learning_rate * m_hat / (math::sqrt(v_hat) + self.moments.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamId;

    fn single_param(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("w".into(), Tensor::scalar(value));
        store
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut store = single_param(1.0);
        let mut adam = Adam::new(&store, 0.01, AdamMoments::default());
        adam.step(&mut store, &[Tensor::scalar(3.5)]).unwrap();
        let moved = 1.0 - store.tensor(ParamId(0)).scalar_value();
        assert!((moved - 0.01).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = single_param(2.0);
        let mut adam = Adam::new(&store, 0.1, AdamMoments::default());
        for _ in 0..5 {
            adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(store.tensor(ParamId(0)).scalar_value(), 2.0);
    }

    #[test]
    fn identical_runs_produce_identical_trajectories() {
        let run = || {
            let mut store = single_param(1.0);
            let mut adam = Adam::new(&store, 0.05, AdamMoments::default());
            let mut history = alloc::vec::Vec::new();
            for k in 0..20 {
                let g = libm::sin(k as f64 * 0.37);
                adam.step(&mut store, &[Tensor::scalar(g)]).unwrap();
                history.push(store.tensor(ParamId(0)).scalar_value());
            }
            history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = single_param(1.0);
        let mut adam = Adam::new(&store, 0.05, AdamMoments::default());
        let err = adam
            .step(&mut store, &[Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient { .. }));
    }
}
