//! State-conditioned diagonal Gaussian source policy with tanh squashing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::DenseArray;
use crate::critic::ActionValue;
use crate::error::{QflowError, Result};
use crate::nn::{Activation, AdamState, MlpNetwork, NetworkSpec, ParamGrads, DEFAULT_LEARNING_RATE};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Largest `f64` below one; squashed actions are kept strictly inside the box.
const INSIDE_ONE: f64 = 1.0 - f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub log_std_bounds: (f64, f64),
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256; 3],
            activation: Activation::Relu,
            learning_rate: DEFAULT_LEARNING_RATE,
            log_std_bounds: (LOG_STD_MIN, LOG_STD_MAX),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.log_std_bounds;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(QflowError::config("network.policy_log_std", "lower bound must be below upper bound"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(QflowError::config("train.learning_rate", "must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(QflowError::config("network.policy_hidden", "widths must be positive"));
        }
        Ok(())
    }
}

/// One reparameterized draw and the intermediates its gradient needs.
#[derive(Debug, Clone)]
pub struct SourceSample {
    /// Squashed actions in (−1, 1).
    pub actions: DenseArray,
    /// `μ + σ ξ` before squashing.
    pub pre_squash: DenseArray,
    pub noise: DenseArray,
    pub mean: DenseArray,
    /// Clamped log standard deviation.
    pub log_std: DenseArray,
    tape: crate::nn::Tape,
    raw_log_std: DenseArray,
}

#[derive(Debug, Clone)]
pub struct GaussianSourcePolicy {
    trunk: MlpNetwork,
    adam: AdamState,
    action_dim: usize,
    log_std_bounds: (f64, f64),
    std_override: Option<f64>,
}

impl GaussianSourcePolicy {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: &PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let spec = NetworkSpec {
            input_dim: state_dim,
            hidden: config.hidden.clone(),
            output_dim: 2 * action_dim,
            hidden_activation: config.activation,
            output_activation: Activation::Identity,
            batch_norm: None,
        };
        let trunk = MlpNetwork::new("policy.source", &spec, rng)?;
        Self::from_trunk(trunk, action_dim, config.log_std_bounds, config.learning_rate)
    }

    pub fn from_trunk(trunk: MlpNetwork, action_dim: usize, log_std_bounds: (f64, f64), learning_rate: f64) -> Result<Self> {
        if trunk.output_dim() != 2 * action_dim {
            return Err(QflowError::dims("source trunk output", 2 * action_dim, trunk.output_dim()));
        }
        Ok(Self {
            adam: AdamState::new(&trunk.param_shapes(), learning_rate),
            trunk,
            action_dim,
            log_std_bounds,
            std_override: None,
        })
    }

    /// State-independent Gaussian with pre-squash mean `mean` and log-std `log_std`.
    pub fn constant(state_dim: usize, mean: &[f64], log_std: &[f64]) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(QflowError::dims("constant source log_std", mean.len(), log_std.len()));
        }
        let spec = NetworkSpec {
            input_dim: state_dim,
            hidden: vec![],
            output_dim: 2 * mean.len(),
            hidden_activation: Activation::Identity,
            output_activation: Activation::Identity,
            batch_norm: None,
        };
        let mut trunk = MlpNetwork::new("policy.source", &spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let layer = &mut trunk.layers_mut()[0];
        layer.zero_init();
        layer.bias[..mean.len()].copy_from_slice(mean);
        layer.bias[mean.len()..].copy_from_slice(log_std);
        Self::from_trunk(trunk, mean.len(), (LOG_STD_MIN, LOG_STD_MAX), DEFAULT_LEARNING_RATE)
    }

    pub fn trunk(&self) -> &MlpNetwork {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut MlpNetwork {
        &mut self.trunk
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn log_std_bounds(&self) -> (f64, f64) {
        self.log_std_bounds
    }

    pub fn update_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// Replaces σ(s) by a fixed value (0 gives the deterministic mean action).
    pub fn set_std_override(&mut self, std: Option<f64>) {
        self.std_override = std;
    }

    pub fn std_override(&self) -> Option<f64> {
        self.std_override
    }

    fn heads(&self, states: &DenseArray) -> Result<(DenseArray, DenseArray, DenseArray, crate::nn::Tape)> {
        states.expect_shape("source states", (states.rows(), self.state_dim()))?;
        let (out, tape) = self.trunk.run(states, crate::nn::Mode::Eval)?;
        let mean = out.slice_cols(0, self.action_dim);
        let raw = out.slice_cols(self.action_dim, 2 * self.action_dim);
        let (lo, hi) = self.log_std_bounds;
        let log_std = raw.map(|v| v.clamp(lo, hi));
        Ok((mean, log_std, raw, tape))
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> DenseArray {
        let data = (0..rows * self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        DenseArray::new(rows, self.action_dim, data).expect("gaussian draws are finite")
    }

    /// `tanh(μ + σ ξ)` for a given standard-normal `noise`.
    pub fn sample_with_noise(&self, states: &DenseArray, noise: &DenseArray) -> Result<SourceSample> {
        let (mean, log_std, raw_log_std, tape) = self.heads(states)?;
        noise.expect_shape("source noise", mean.shape())?;
        let mut pre = mean.clone();
        for ((p, &l), &xi) in pre.data_mut().iter_mut().zip(log_std.data()).zip(noise.data()) {
            let std = self.std_override.unwrap_or_else(|| l.exp());
            *p += std * xi;
        }
        let actions = pre.map(|u| u.tanh().clamp(-INSIDE_ONE, INSIDE_ONE));
        Ok(SourceSample {
            actions,
            pre_squash: pre,
            noise: noise.clone(),
            mean,
            log_std,
            tape,
            raw_log_std,
        })
    }

    pub fn sample_source<R: Rng + ?Sized>(&self, states: &DenseArray, rng: &mut R) -> Result<DenseArray> {
        let noise = self.draw_noise(states.rows(), rng);
        Ok(self.sample_with_noise(states, &noise)?.actions)
    }

    /// `tanh(μ(s))`, no randomness.
    pub fn mean_action(&self, states: &DenseArray) -> Result<DenseArray> {
        let (mean, _, _, _) = self.heads(states)?;
        Ok(mean.map(|u| u.tanh().clamp(-INSIDE_ONE, INSIDE_ONE)))
    }

    /// `−mean Q(s, a)` over a reparameterized draw and its parameter gradient.
    pub fn loss_gradients(
        &self,
        critic: &dyn ActionValue,
        states: &DenseArray,
        noise: &DenseArray,
    ) -> Result<(f64, ParamGrads, SourceSample)> {
        let sample = self.sample_with_noise(states, noise)?;
        let (values, grad_a) = critic.values_and_gradients(states, &sample.actions)?;
        let n = states.rows() as f64;
        let loss = -values.iter().sum::<f64>() / n;
        let (lo, hi) = self.log_std_bounds;
        let ad = self.action_dim;
        let mut upstream = DenseArray::zeros(states.rows(), 2 * ad);
        for i in 0..states.rows() {
            for j in 0..ad {
                let a = sample.actions.get(i, j);
                let d_pre = -grad_a.get(i, j) / n * (1.0 - a * a);
                upstream.set(i, j, d_pre);
                let raw = sample.raw_log_std.get(i, j);
                let d_log = if self.std_override.is_none() && raw > lo && raw < hi {
                    d_pre * noise.get(i, j) * sample.log_std.get(i, j).exp()
                } else {
                    0.0
                };
                upstream.set(i, ad + j, d_log);
            }
        }
        let grads = self.trunk.backward_tape(&sample.tape, &upstream, true)?;
        Ok((loss, grads.params.expect("requested parameter gradients"), sample))
    }

    /// One Adam step on the trunk minimizing `−mean Q(s, a)`; the critic is only read.
    pub fn source_update<R: Rng + ?Sized>(
        &mut self,
        critic: &dyn ActionValue,
        states: &DenseArray,
        rng: &mut R,
    ) -> Result<f64> {
        let noise = self.draw_noise(states.rows(), rng);
        let (loss, grads, _) = self.loss_gradients(critic, states, &noise)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(QflowError::NonFinite(format!("source policy loss ({loss})")));
        }
        self.adam.update(self.trunk.params_mut(), &grads)?;
        Ok(loss)
    }
}
