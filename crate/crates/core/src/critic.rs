//! Twin batch-normalized Q-networks trained without a target network.

use rand::Rng;

use crate::array::DenseArray;
use crate::error::{QflowError, Result};
use crate::nn::{
    Activation, AdamState, BatchNormSettings, MlpNetwork, Mode, NetworkSpec, ParamGrads, DEFAULT_LEARNING_RATE,
};
use crate::replay::Batch;

pub const DEFAULT_DISCOUNT: f64 = 0.99;

/// Anything that scores state-action pairs and exposes `∇_a Q`.
pub trait ActionValue {
    fn action_dim(&self) -> usize;

    fn values(&self, states: &DenseArray, actions: &DenseArray) -> Result<Vec<f64>>;

    fn action_gradients(&self, states: &DenseArray, actions: &DenseArray) -> Result<DenseArray>;

    fn values_and_gradients(&self, states: &DenseArray, actions: &DenseArray) -> Result<(Vec<f64>, DenseArray)> {
        Ok((self.values(states, actions)?, self.action_gradients(states, actions)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: Option<BatchNormSettings>,
    pub discount: f64,
    pub learning_rate: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256; 3],
            activation: Activation::Relu,
            batch_norm: Some(BatchNormSettings::default()),
            discount: DEFAULT_DISCOUNT,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(QflowError::config("train.discount", "must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(QflowError::config("train.learning_rate", "must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(QflowError::config("network.critic_hidden", "widths must be positive"));
        }
        if let Some(bn) = self.batch_norm {
            bn.validate()?;
        }
        Ok(())
    }

    pub fn network_spec(&self, state_dim: usize, action_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim: state_dim + action_dim,
            hidden: self.hidden.clone(),
            output_dim: 1,
            hidden_activation: self.activation,
            output_activation: Activation::Identity,
            batch_norm: self.batch_norm,
        }
    }
}

/// `y = r + γ (1 - terminal) q_next`.
pub fn bellman_targets(rewards: &[f64], terminals: &[f64], next_values: &[f64], discount: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(terminals)
        .zip(next_values)
        .map(|((r, d), q)| r + discount * (1.0 - d) * q)
        .collect()
}

/// Loss and parameter gradients of one critic update, before the optimizer step.
#[derive(Debug, Clone)]
pub struct CriticGradients {
    pub loss: f64,
    pub targets: Vec<f64>,
    pub q1: ParamGrads,
    pub q2: ParamGrads,
}

#[derive(Debug, Clone)]
pub struct TwinCritic {
    q1: MlpNetwork,
    q2: MlpNetwork,
    adam_q1: AdamState,
    adam_q2: AdamState,
    discount: f64,
    state_dim: usize,
    action_dim: usize,
}

impl TwinCritic {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: &CriticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let spec = config.network_spec(state_dim, action_dim);
        let q1 = MlpNetwork::new("critic.q1", &spec, rng)?;
        let q2 = MlpNetwork::new("critic.q2", &spec, rng)?;
        Self::from_heads(q1, q2, config.discount, config.learning_rate, state_dim, action_dim)
    }

    pub fn from_heads(
        q1: MlpNetwork,
        q2: MlpNetwork,
        discount: f64,
        learning_rate: f64,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        for head in [&q1, &q2] {
            if head.input_dim() != state_dim + action_dim || head.output_dim() != 1 {
                return Err(QflowError::InvalidArgument(format!(
                    "{} must map {} inputs to one value",
                    head.name(),
                    state_dim + action_dim
                )));
            }
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(QflowError::config("train.discount", "must lie in (0, 1)"));
        }
        Ok(Self {
            adam_q1: AdamState::new(&q1.param_shapes(), learning_rate),
            adam_q2: AdamState::new(&q2.param_shapes(), learning_rate),
            q1,
            q2,
            discount,
            state_dim,
            action_dim,
        })
    }

    pub fn heads(&self) -> (&MlpNetwork, &MlpNetwork) {
        (&self.q1, &self.q2)
    }

    pub fn heads_mut(&mut self) -> (&mut MlpNetwork, &mut MlpNetwork) {
        (&mut self.q1, &mut self.q2)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn update_count(&self) -> u64 {
        self.adam_q1.step_count()
    }

    fn joint_input(&self, states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        states.expect_shape("critic states", (states.rows(), self.state_dim))?;
        actions.expect_shape("critic actions", (states.rows(), self.action_dim))?;
        DenseArray::hstack(&[states, actions])
    }

    /// Outputs of both heads. Train mode normalizes with batch statistics but leaves
    /// running statistics untouched.
    pub fn head_values(&self, states: &DenseArray, actions: &DenseArray, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.joint_input(states, actions)?;
        let (y1, _) = self.q1.run(&x, mode)?;
        let (y2, _) = self.q2.run(&x, mode)?;
        Ok((y1.into_data(), y2.into_data()))
    }

    pub fn q_min(&self, states: &DenseArray, actions: &DenseArray, mode: Mode) -> Result<Vec<f64>> {
        let (a, b) = self.head_values(states, actions, mode)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    /// Loss and gradients of the Bellman regression. Current and next pairs pass through
    /// batch norm as one joint batch; the next-state half only feeds the (constant) target.
    pub fn loss_gradients(&self, batch: &Batch, next_actions: &DenseArray) -> Result<(CriticGradients, [crate::nn::Tape; 2])> {
        let n = batch.len();
        let current = self.joint_input(&batch.states, &batch.actions)?;
        let next = self.joint_input(&batch.next_states, next_actions)?;
        let joint = DenseArray::vstack(&[&current, &next])?;
        let (y1, tape1) = self.q1.run(&joint, Mode::Train)?;
        let (y2, tape2) = self.q2.run(&joint, Mode::Train)?;
        let next_min: Vec<f64> = (n..2 * n).map(|i| y1.data()[i].min(y2.data()[i])).collect();
        let targets = bellman_targets(&batch.rewards, &batch.terminals, &next_min, self.discount);
        let (l1, g1) = self.head_gradients(&self.q1, &tape1, &y1, &targets)?;
        let (l2, g2) = self.head_gradients(&self.q2, &tape2, &y2, &targets)?;
        Ok((
            CriticGradients {
                loss: l1 + l2,
                targets,
                q1: g1,
                q2: g2,
            },
            [tape1, tape2],
        ))
    }

    /// Mean squared error of one head on the first half of a joint batch against fixed targets.
    pub fn head_gradients(
        &self,
        head: &MlpNetwork,
        tape: &crate::nn::Tape,
        output: &DenseArray,
        targets: &[f64],
    ) -> Result<(f64, ParamGrads)> {
        let n = targets.len();
        let mut upstream = DenseArray::zeros(output.rows(), 1);
        let mut loss = 0.0;
        for i in 0..n {
            let e = output.data()[i] - targets[i];
            loss += e * e / n as f64;
            upstream.data_mut()[i] = 2.0 * e / n as f64;
        }
        let grads = head.backward_tape(tape, &upstream, true)?;
        Ok((loss, grads.params.expect("requested parameter gradients")))
    }

    /// One Adam step on both heads. Nothing is mutated when the loss or a gradient is non-finite.
    pub fn critic_update(&mut self, batch: &Batch, next_actions: &DenseArray) -> Result<f64> {
        let (g, [t1, t2]) = self.loss_gradients(batch, next_actions)?;
        if !g.loss.is_finite() || !g.q1.is_finite() || !g.q2.is_finite() {
            return Err(QflowError::NonFinite(format!("critic loss ({})", g.loss)));
        }
        self.adam_q1.update(self.q1.params_mut(), &g.q1)?;
        self.adam_q2.update(self.q2.params_mut(), &g.q2)?;
        self.q1.apply_running_stats(&t1);
        self.q2.apply_running_stats(&t2);
        Ok(g.loss)
    }

    /// Eval-mode q_min together with the gradient of the smaller head w.r.t. the action
    /// (head 1 on ties).
    pub fn min_head_gradients(&self, states: &DenseArray, actions: &DenseArray) -> Result<(Vec<f64>, DenseArray)> {
        let x = self.joint_input(states, actions)?;
        let n = x.rows();
        let (y1, t1) = self.q1.run(&x, Mode::Eval)?;
        let (y2, t2) = self.q2.run(&x, Mode::Eval)?;
        let mut up1 = DenseArray::zeros(n, 1);
        let mut up2 = DenseArray::zeros(n, 1);
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (y1.data()[i], y2.data()[i]);
            if a <= b {
                up1.data_mut()[i] = 1.0;
                values.push(a);
            } else {
                up2.data_mut()[i] = 1.0;
                values.push(b);
            }
        }
        let g1 = self.q1.backward_tape(&t1, &up1, false)?.input;
        let g2 = self.q2.backward_tape(&t2, &up2, false)?.input;
        let mut out = DenseArray::zeros(n, self.action_dim);
        for i in 0..n {
            let (r1, r2) = (g1.row(i), g2.row(i));
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = r1[self.state_dim + j] + r2[self.state_dim + j];
            }
        }
        Ok((values, out))
    }

    pub fn action_gradient(&self, states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        Ok(self.min_head_gradients(states, actions)?.1)
    }
}

impl ActionValue for TwinCritic {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn values(&self, states: &DenseArray, actions: &DenseArray) -> Result<Vec<f64>> {
        self.q_min(states, actions, Mode::Eval)
    }

    fn action_gradients(&self, states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        self.action_gradient(states, actions)
    }

    fn values_and_gradients(&self, states: &DenseArray, actions: &DenseArray) -> Result<(Vec<f64>, DenseArray)> {
        self.min_head_gradients(states, actions)
    }
}

/// `Q(s, a) = -½ Σⱼ cⱼ (aⱼ - a*ⱼ)²`, independent of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCritic {
    optimum: Vec<f64>,
    curvature: Vec<f64>,
}

impl QuadraticCritic {
    pub fn new(optimum: Vec<f64>) -> Self {
        let curvature = vec![1.0; optimum.len()];
        Self { optimum, curvature }
    }

    pub fn with_curvature(optimum: Vec<f64>, curvature: Vec<f64>) -> Result<Self> {
        if optimum.len() != curvature.len() {
            return Err(QflowError::dims("quadratic curvature", optimum.len(), curvature.len()));
        }
        if curvature.iter().any(|c| !(*c > 0.0)) {
            return Err(QflowError::InvalidArgument("curvature must be positive".into()));
        }
        Ok(Self { optimum, curvature })
    }

    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }
}

impl ActionValue for QuadraticCritic {
    fn action_dim(&self) -> usize {
        self.optimum.len()
    }

    fn values(&self, states: &DenseArray, actions: &DenseArray) -> Result<Vec<f64>> {
        actions.expect_shape("quadratic critic actions", (states.rows(), self.optimum.len()))?;
        Ok(actions
            .iter_rows()
            .map(|a| {
                -0.5 * a
                    .iter()
                    .zip(&self.optimum)
                    .zip(&self.curvature)
                    .map(|((x, o), c)| c * (x - o) * (x - o))
                    .sum::<f64>()
            })
            .collect())
    }

    fn action_gradients(&self, states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        actions.expect_shape("quadratic critic actions", (states.rows(), self.optimum.len()))?;
        let mut g = actions.clone();
        for row in 0..g.rows() {
            for (j, v) in g.row_mut(row).iter_mut().enumerate() {
                *v = self.curvature[j] * (self.optimum[j] - *v);
            }
        }
        Ok(g)
    }
}

/// `Q ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroCritic {
    pub action_dim: usize,
}

impl ActionValue for ZeroCritic {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn values(&self, states: &DenseArray, actions: &DenseArray) -> Result<Vec<f64>> {
        actions.expect_shape("zero critic actions", (states.rows(), self.action_dim))?;
        Ok(vec![0.0; actions.rows()])
    }

    fn action_gradients(&self, states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        actions.expect_shape("zero critic actions", (states.rows(), self.action_dim))?;
        Ok(DenseArray::zeros(actions.rows(), self.action_dim))
    }
}
