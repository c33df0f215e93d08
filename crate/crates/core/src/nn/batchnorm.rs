use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{QflowError, Result};

use super::Mode;

pub const DEFAULT_BN_DECAY: f64 = 0.99;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Per-feature batch normalization with exponential running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    decay: f64,
    epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSettings {
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for BatchNormSettings {
    fn default() -> Self {
        Self {
            decay: DEFAULT_BN_DECAY,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }
}

impl BatchNormSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(QflowError::config("network.bn_decay", "must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(QflowError::config("network.bn_epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Values cached by a batch-norm forward for its backward.
#[derive(Debug, Clone)]
pub(crate) struct BnTape {
    mode: Mode,
    x_hat: DenseArray,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(dim: usize, settings: BatchNormSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            decay: settings.decay,
            epsilon: settings.epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn settings(&self) -> BatchNormSettings {
        BatchNormSettings {
            decay: self.decay,
            epsilon: self.epsilon,
        }
    }

    pub(crate) fn forward(&self, x: &DenseArray, mode: Mode) -> (DenseArray, BnTape) {
        let (rows, dim) = x.shape();
        let (mean, var) = match mode {
            Mode::Train => batch_moments(x),
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut x_hat = DenseArray::zeros(rows, dim);
        let mut y = DenseArray::zeros(rows, dim);
        for r in 0..rows {
            let xr = x.row(r);
            let hr = x_hat.row_mut(r);
            for j in 0..dim {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let yr = y.row_mut(r);
            for j in 0..dim {
                yr[j] = self.gamma[j] * x_hat.get(r, j) + self.beta[j];
            }
        }
        let (batch_mean, batch_var) = match mode {
            Mode::Train => (mean, var),
            Mode::Eval => (Vec::new(), Vec::new()),
        };
        (
            y,
            BnTape {
                mode,
                x_hat,
                inv_std,
                batch_mean,
                batch_var,
            },
        )
    }

    /// `running = decay * running + (1 - decay) * batch` for mean and (population) variance.
    pub(crate) fn update_running(&mut self, tape: &BnTape) {
        if tape.mode != Mode::Train {
            return;
        }
        let d = self.decay;
        for j in 0..self.dim() {
            self.running_mean[j] = d * self.running_mean[j] + (1.0 - d) * tape.batch_mean[j];
            self.running_var[j] = d * self.running_var[j] + (1.0 - d) * tape.batch_var[j];
        }
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub(crate) fn backward(&self, tape: &BnTape, dy: &DenseArray) -> (DenseArray, Vec<f64>, Vec<f64>) {
        let (rows, dim) = dy.shape();
        let mut dgamma = vec![0.0; dim];
        let mut dbeta = vec![0.0; dim];
        for r in 0..rows {
            let g = dy.row(r);
            let h = tape.x_hat.row(r);
            for j in 0..dim {
                dgamma[j] += g[j] * h[j];
                dbeta[j] += g[j];
            }
        }
        let mut dx = DenseArray::zeros(rows, dim);
        match tape.mode {
            Mode::Eval => {
                for r in 0..rows {
                    let g = dy.row(r);
                    let out = dx.row_mut(r);
                    for j in 0..dim {
                        out[j] = g[j] * self.gamma[j] * tape.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                // dx = inv_std / B * (B*dxh - sum(dxh) - x_hat * sum(dxh * x_hat)), dxh = dy * gamma
                let n = rows as f64;
                for r in 0..rows {
                    let h = tape.x_hat.row(r);
                    let g = dy.row(r);
                    let out = dx.row_mut(r);
                    for j in 0..dim {
                        let dxh = g[j] * self.gamma[j];
                        let sum_dxh = dbeta[j] * self.gamma[j];
                        let sum_dxh_h = dgamma[j] * self.gamma[j];
                        out[j] = tape.inv_std[j] / n * (n * dxh - sum_dxh - h[j] * sum_dxh_h);
                    }
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

/// Column means and population variances.
pub(crate) fn batch_moments(x: &DenseArray) -> (Vec<f64>, Vec<f64>) {
    let (rows, dim) = x.shape();
    let n = rows.max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in x.iter_rows() {
        for j in 0..dim {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_two_point_batch() {
        let bn = BatchNormLayer::new(1, BatchNormSettings::default()).unwrap();
        let x = DenseArray::new(2, 1, vec![1.0, 3.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0) + expect).abs() < 1e-15);
        assert!((y.get(1, 0) - expect).abs() < 1e-15);
        assert!((y.get(1, 0) - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn running_statistics_follow_exponential_update() {
        let mut bn = BatchNormLayer::new(2, BatchNormSettings::default()).unwrap();
        bn.running_mean = vec![0.5, -1.0];
        bn.running_var = vec![2.0, 0.25];
        let x = DenseArray::new(3, 2, vec![1.0, 2.0, 4.0, -1.0, 7.0, 0.5]).unwrap();
        let (_, tape) = bn.forward(&x, Mode::Train);
        let (mean, var) = batch_moments(&x);
        bn.update_running(&tape);
        for j in 0..2 {
            let old_m = [0.5, -1.0][j];
            let old_v = [2.0, 0.25][j];
            assert_eq!(bn.running_mean[j], 0.99 * old_m + (1.0 - 0.99) * mean[j]);
            assert_eq!(bn.running_var[j], 0.99 * old_v + (1.0 - 0.99) * var[j]);
        }
    }

    #[test]
    fn eval_mode_leaves_stats_alone() {
        let mut bn = BatchNormLayer::new(1, BatchNormSettings::default()).unwrap();
        let before = bn.clone();
        let x = DenseArray::new(2, 1, vec![5.0, 9.0]).unwrap();
        let (y1, tape) = bn.forward(&x, Mode::Eval);
        bn.update_running(&tape);
        let (y2, _) = bn.forward(&x, Mode::Eval);
        assert_eq!(bn, before);
        assert_eq!(y1, y2);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(BatchNormLayer::new(1, BatchNormSettings { decay: 1.0, epsilon: 1e-5 }).is_err());
        assert!(BatchNormLayer::new(1, BatchNormSettings { decay: 0.9, epsilon: 0.0 }).is_err());
    }
}
