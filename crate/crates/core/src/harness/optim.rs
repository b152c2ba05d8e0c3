use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{PrnError, Result};
use crate::network::{NetworkParams, ParamGrads};

/// Bias-corrected Adam moments for a list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| DVector::zeros(n)).collect(),
            v: sizes.iter().map(|&n| DVector::zeros(n)).collect(),
        }
    }

    pub fn for_params(params: &NetworkParams) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(&sizes)
    }

    /// One update of `tensors` in place.
    pub fn update(&mut self, tensors: Vec<&mut [f64]>, grads: &[DVector<f64>], lr: f64) -> Result<()> {
        if tensors.len() != grads.len()
            || tensors.len() != self.m.len()
            || tensors
                .iter()
                .zip(grads)
                .zip(&self.m)
                .any(|((t, g), m)| t.len() != g.len() || t.len() != m.len())
        {
            return Err(PrnError::DimensionMismatch(
                "parameters, gradients and optimizer state disagree in shape".into(),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        for (((t, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..t.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                t[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut NetworkParams, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    state.update(params.tensors_mut(), &grads.0, lr)
}

/// Step decay `lr0 · decay^⌊iter / every⌋`.
pub fn lr_at(iter: usize, lr0: f64, decay: f64, every: usize) -> f64 {
    lr0 * decay.powi((iter / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = [0.0];
        let mut st = AdamState::new(&[1]);
        st.update(vec![&mut x], &[DVector::from_element(1, 1.0)], 0.1).unwrap();
        assert!((x[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut x = [1.5, -2.0];
        let mut st = AdamState::new(&[2]);
        for _ in 0..100 {
            st.update(vec![&mut x], &[DVector::zeros(2)], 0.1).unwrap();
        }
        assert_eq!(x, [1.5, -2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut x = [0.0, 0.0];
        let mut st = AdamState::new(&[2]);
        assert!(st.update(vec![&mut x], &[DVector::zeros(3)], 0.1).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0, 1e-4, 0.8, 5000), 1e-4);
        assert!((lr_at(5000, 1e-4, 0.8, 5000) - 8e-5).abs() < 1e-18);
        assert!((lr_at(12500, 1e-4, 0.8, 5000) - 6.4e-5).abs() < 1e-18);
        assert_eq!(lr_at(4999, 1e-4, 0.8, 5000), 1e-4);
    }
}
