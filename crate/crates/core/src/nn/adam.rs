use crate::error::{QflowError, Result};

use super::mlp::ParamGrads;

pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;

/// Bias-corrected Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize], learning_rate: f64) -> Self {
        Self {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    /// Applies one Adam step. Non-finite gradients reject the whole update and leave
    /// both parameters and moments untouched.
    pub fn update(&mut self, mut params: Vec<&mut [f64]>, grads: &ParamGrads) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(QflowError::dims("adam parameter tensors", self.first_moment.len(), params.len()));
        }
        if grads.tensors.len() != params.len() {
            return Err(QflowError::dims("adam gradient tensors", params.len(), grads.tensors.len()));
        }
        for (i, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
            if p.len() != self.first_moment[i].len() {
                return Err(QflowError::dims(format!("adam tensor {i}"), self.first_moment[i].len(), p.len()));
            }
            if g.len() != p.len() {
                return Err(QflowError::dims(format!("adam gradient {i}"), p.len(), g.len()));
            }
        }
        if !grads.is_finite() {
            return Err(QflowError::NonFinite("adam gradients".into()));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, &g) in grads.tensors[i].iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
