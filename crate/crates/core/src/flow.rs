//! Q-guided flow: velocity field, Euler action sampler, capped gradient-ascent targets
//! and the conditional flow-matching loss on the straight-line path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::critic::ActionValue;
use crate::error::{QflowError, Result};
use crate::nn::{Activation, AdamState, MlpNetwork, Mode, NetworkSpec, ParamGrads, DEFAULT_LEARNING_RATE};
use crate::source_policy::GaussianSourcePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub ascent_steps: usize,
    /// Initial ascent step size before capping.
    pub eta: f64,
    pub ode_steps: usize,
    pub ode_dt: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            ascent_steps: 20,
            eta: 0.01,
            ode_steps: 20,
            ode_dt: 0.05,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ascent_steps < 1 {
            return Err(QflowError::config("flow.ascent_steps", "must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(QflowError::config("flow.eta", "must be positive"));
        }
        if self.ode_steps < 1 {
            return Err(QflowError::config("flow.ode_steps", "must be at least 1"));
        }
        if !(self.ode_dt > 0.0) || (self.ode_steps as f64 * self.ode_dt - 1.0).abs() > 1e-12 {
            return Err(QflowError::config(
                "flow.ode_dt",
                format!("ode_steps × ode_dt must equal 1 (got {} × {})", self.ode_steps, self.ode_dt),
            ));
        }
        Ok(())
    }
}

/// A time-, state- and action-conditioned velocity `v(t, s, a)`.
pub trait VelocityModel {
    fn action_dim(&self) -> usize;

    /// One time per row.
    fn velocity(&self, times: &[f64], states: &DenseArray, actions: &DenseArray) -> Result<DenseArray>;
}

/// Adapts a per-row closure `(t, s, a) -> v` to [`VelocityModel`].
pub struct FnVelocity<F> {
    action_dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &[f64]) -> Vec<f64>> FnVelocity<F> {
    pub fn new(action_dim: usize, f: F) -> Self {
        Self { action_dim, f }
    }
}

impl<F: Fn(f64, &[f64], &[f64]) -> Vec<f64>> VelocityModel for FnVelocity<F> {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn velocity(&self, times: &[f64], states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        let mut out = DenseArray::zeros(actions.rows(), self.action_dim);
        for i in 0..actions.rows() {
            let v = (self.f)(times[i], states.row(i), actions.row(i));
            if v.len() != self.action_dim {
                return Err(QflowError::dims("velocity closure output", self.action_dim, v.len()));
            }
            out.row_mut(i).copy_from_slice(&v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256; 3],
            activation: Activation::Relu,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(QflowError::config("train.learning_rate", "must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(QflowError::config("network.flow_hidden", "widths must be positive"));
        }
        Ok(())
    }
}

/// Network `v_w(t, s, a)` on the input `[t, s, a]`; the output layer starts at zero so
/// the initial transport is the identity.
#[derive(Debug, Clone)]
pub struct VelocityField {
    net: MlpNetwork,
    adam: AdamState,
    state_dim: usize,
    action_dim: usize,
}

impl VelocityField {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: &FieldConfig, rng: &mut R) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(QflowError::config("train.learning_rate", "must be positive"));
        }
        if config.hidden.iter().any(|&h| h == 0) {
            return Err(QflowError::config("network.flow_hidden", "widths must be positive"));
        }
        let spec = NetworkSpec {
            input_dim: 1 + state_dim + action_dim,
            hidden: config.hidden.clone(),
            output_dim: action_dim,
            hidden_activation: config.activation,
            output_activation: Activation::Identity,
            batch_norm: None,
        };
        let mut net = MlpNetwork::new("policy.flow", &spec, rng)?;
        net.layers_mut().last_mut().expect("at least one layer").zero_init();
        Self::from_network(net, state_dim, action_dim, config.learning_rate)
    }

    pub fn from_network(net: MlpNetwork, state_dim: usize, action_dim: usize, learning_rate: f64) -> Result<Self> {
        if net.input_dim() != 1 + state_dim + action_dim {
            return Err(QflowError::dims("velocity field input", 1 + state_dim + action_dim, net.input_dim()));
        }
        if net.output_dim() != action_dim {
            return Err(QflowError::dims("velocity field output", action_dim, net.output_dim()));
        }
        Ok(Self {
            adam: AdamState::new(&net.param_shapes(), learning_rate),
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn network(&self) -> &MlpNetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut MlpNetwork {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn update_count(&self) -> u64 {
        self.adam.step_count()
    }

    fn input(&self, times: &[f64], states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        let n = actions.rows();
        if times.len() != n {
            return Err(QflowError::dims("velocity times", n, times.len()));
        }
        states.expect_shape("velocity states", (n, self.state_dim))?;
        actions.expect_shape("velocity actions", (n, self.action_dim))?;
        let t = DenseArray::new(n, 1, times.to_vec())?;
        DenseArray::hstack(&[&t, states, actions])
    }

    /// CFM loss at explicit per-row times and its parameter gradient.
    pub fn loss_gradients(
        &self,
        states: &DenseArray,
        a0: &DenseArray,
        a1: &DenseArray,
        times: &[f64],
    ) -> Result<(f64, ParamGrads)> {
        let (at, target) = interpolate_batch(times, a0, a1)?;
        let x = self.input(times, states, &at)?;
        let (v, tape) = self.net.run(&x, Mode::Train)?;
        let n = v.rows() as f64;
        let mut upstream = v.sub(&target)?;
        let loss = upstream.data().iter().map(|e| e * e).sum::<f64>() / n;
        upstream.map_inplace(|e| 2.0 * e / n);
        let g = self.net.backward_tape(&tape, &upstream, true)?;
        Ok((loss, g.params.expect("requested parameter gradients")))
    }

    /// One Adam step on the CFM loss with one `t ~ U[0, 1]` per row.
    pub fn flow_matching_update<R: Rng + ?Sized>(
        &mut self,
        states: &DenseArray,
        a0: &DenseArray,
        a1: &DenseArray,
        rng: &mut R,
    ) -> Result<f64> {
        let times: Vec<f64> = (0..a0.rows()).map(|_| rng.random::<f64>()).collect();
        let (loss, grads) = self.loss_gradients(states, a0, a1, &times)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(QflowError::NonFinite(format!("flow matching loss ({loss})")));
        }
        self.adam.update(self.net.params_mut(), &grads)?;
        Ok(loss)
    }
}

impl VelocityModel for VelocityField {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn velocity(&self, times: &[f64], states: &DenseArray, actions: &DenseArray) -> Result<DenseArray> {
        self.net.predict(&self.input(times, states, actions)?)
    }
}

/// One point on the straight-line conditional path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatchSample {
    pub t: f64,
    pub state: Vec<f64>,
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub at: Vec<f64>,
    pub target_velocity: Vec<f64>,
}

impl FlowMatchSample {
    pub fn new(t: f64, state: &[f64], a0: &[f64], a1: &[f64]) -> Result<Self> {
        if a0.len() != a1.len() {
            return Err(QflowError::dims("flow match endpoints", a0.len(), a1.len()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(QflowError::InvalidArgument(format!("path time {t} outside [0, 1]")));
        }
        Ok(Self {
            t,
            state: state.to_vec(),
            a0: a0.to_vec(),
            a1: a1.to_vec(),
            at: a0.iter().zip(a1).map(|(x, y)| (1.0 - t) * x + t * y).collect(),
            target_velocity: a0.iter().zip(a1).map(|(x, y)| y - x).collect(),
        })
    }
}

/// Rowwise `(1−t) a0 + t a1` and `a1 − a0`.
pub fn interpolate_batch(times: &[f64], a0: &DenseArray, a1: &DenseArray) -> Result<(DenseArray, DenseArray)> {
    a1.expect_shape("flow target endpoint", a0.shape())?;
    if times.len() != a0.rows() {
        return Err(QflowError::dims("path times", a0.rows(), times.len()));
    }
    let mut at = a0.clone();
    for (i, &t) in times.iter().enumerate() {
        for (x, y) in at.row_mut(i).iter_mut().zip(a1.row(i)) {
            *x = (1.0 - t) * *x + t * y;
        }
    }
    Ok((at, a1.sub(a0)?))
}

/// `mean_rows ‖v(t, s, a_t) − (a1 − a0)‖²` for any velocity model.
pub fn flow_matching_loss(
    model: &dyn VelocityModel,
    states: &DenseArray,
    a0: &DenseArray,
    a1: &DenseArray,
    times: &[f64],
) -> Result<f64> {
    let (at, target) = interpolate_batch(times, a0, a1)?;
    let v = model.velocity(times, states, &at)?;
    let diff = v.sub(&target)?;
    Ok(diff.data().iter().map(|e| e * e).sum::<f64>() / a0.rows().max(1) as f64)
}

/// Euler integration of `da/dt = v(t, s, a)` over `steps` of size `dt` starting at `t = 0`,
/// without the final clamp.
pub fn integrate(
    model: &dyn VelocityModel,
    states: &DenseArray,
    start: &DenseArray,
    steps: usize,
    dt: f64,
) -> Result<DenseArray> {
    let mut a = start.clone();
    let mut times = vec![0.0; a.rows()];
    for k in 0..steps {
        times.iter_mut().for_each(|t| *t = k as f64 * dt);
        let v = model.velocity(&times, states, &a)?;
        a.axpy(dt, &v)?;
    }
    Ok(a)
}

/// Result of pushing source samples through the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    /// Executable actions, clamped to the box.
    pub actions: DenseArray,
    pub source: DenseArray,
    /// Number of action components moved by the final clamp.
    pub clamped: usize,
}

impl FlowSample {
    pub fn clamp_rate(&self) -> f64 {
        self.clamped as f64 / self.actions.data().len().max(1) as f64
    }
}

/// Transports a given source action through the flow and clamps the result.
pub fn transport(
    model: &dyn VelocityModel,
    states: &DenseArray,
    source: DenseArray,
    config: &FlowConfig,
) -> Result<FlowSample> {
    let raw = integrate(model, states, &source, config.ode_steps, config.ode_dt)?;
    if !raw.is_finite() {
        return Err(QflowError::NonFinite("flow ODE integration".into()));
    }
    let actions = raw.clamp(-1.0, 1.0);
    let clamped = raw.data().iter().zip(actions.data()).filter(|(a, b)| a != b).count();
    Ok(FlowSample {
        actions,
        source,
        clamped,
    })
}

/// Source draw (or mean action when `deterministic`) transported by the flow.
pub fn sample_flow_action<R: Rng + ?Sized>(
    model: &dyn VelocityModel,
    source: &GaussianSourcePolicy,
    states: &DenseArray,
    rng: &mut R,
    deterministic: bool,
    config: &FlowConfig,
) -> Result<FlowSample> {
    let a0 = if deterministic {
        source.mean_action(states)?
    } else {
        source.sample_source(states, rng)?
    };
    transport(model, states, a0, config)
}

/// `min(η, 2√|A| / ‖g‖)`, or `η` for a zero gradient.
pub fn capped_step_size(grad_norm: f64, action_dim: usize, eta: f64) -> f64 {
    if grad_norm > 0.0 {
        eta.min(2.0 * (action_dim as f64).sqrt() / grad_norm)
    } else {
        eta
    }
}

/// The ascent displacement `η̄ g` for one action.
pub fn capped_step(grad: &[f64], eta: f64) -> Vec<f64> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let step = capped_step_size(norm, grad.len(), eta);
    grad.iter().map(|g| step * g).collect()
}

/// Capped gradient ascent on `critic` from `start`, clamping to the box after each step.
/// `trace(n, actions)` is called after every step `n = 1..=steps`.
pub fn ascend_with_trace(
    critic: &dyn ActionValue,
    states: &DenseArray,
    start: &DenseArray,
    steps: usize,
    eta: f64,
    mut trace: impl FnMut(usize, &DenseArray) -> Result<()>,
) -> Result<DenseArray> {
    let mut a = start.clone();
    for n in 1..=steps {
        let g = critic.action_gradients(states, &a)?;
        if !g.is_finite() {
            return Err(QflowError::NonFinite("critic action gradient".into()));
        }
        for i in 0..a.rows() {
            let step = capped_step(g.row(i), eta);
            for (x, d) in a.row_mut(i).iter_mut().zip(step) {
                *x = (*x + d).clamp(-1.0, 1.0);
            }
        }
        trace(n, &a)?;
    }
    Ok(a)
}

pub fn ascend(critic: &dyn ActionValue, states: &DenseArray, start: &DenseArray, steps: usize, eta: f64) -> Result<DenseArray> {
    ascend_with_trace(critic, states, start, steps, eta, |_, _| Ok(()))
}

/// Source samples and their Q-ascended counterparts, the regression pair for the flow.
pub fn construct_targets<R: Rng + ?Sized>(
    critic: &dyn ActionValue,
    source: &GaussianSourcePolicy,
    states: &DenseArray,
    rng: &mut R,
    config: &FlowConfig,
) -> Result<(DenseArray, DenseArray)> {
    let a0 = source.sample_source(states, rng)?;
    let a1 = ascend(critic, states, &a0, config.ascent_steps, config.eta)?;
    Ok((a0, a1))
}

/// How partially transported actions at time `t` are produced in [`advantage_curve`].
#[derive(Clone, Copy)]
pub enum Transport<'a> {
    /// Capped ascent with a step budget of `⌊t N⌋`.
    Ascent { steps: usize, eta: f64 },
    /// Euler integration of a velocity model for `⌊t K⌋` of `K` steps of size `1/K`.
    Field { model: &'a dyn VelocityModel, ode_steps: usize },
}

impl Transport<'_> {
    fn total_steps(&self) -> usize {
        match self {
            Transport::Ascent { steps, .. } => *steps,
            Transport::Field { ode_steps, .. } => *ode_steps,
        }
    }
}

/// Monte Carlo estimate of `F(t) = E[Q(s, a_t)] − E[Q(s, a_0)]` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageCurve {
    pub t_grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Standard error of each `F(t)` estimate.
    pub std_errors: Vec<f64>,
    /// Standard error of each increment `F(t_{k+1}) − F(t_k)`, from paired samples.
    pub increment_std_errors: Vec<f64>,
}

/// Step budget `⌊t N⌋`, robust to grid points like `0.35 · 20` landing just below an integer.
pub fn step_budget(t: f64, total: usize) -> usize {
    ((t * total as f64) + 1e-9).floor().max(0.0) as usize
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Averages over every state in `states` and `samples` source draws per state; all grid
/// points share the same source draws, so `F(0) = 0` exactly.
pub fn advantage_curve<R: Rng + ?Sized>(
    critic: &dyn ActionValue,
    source: &GaussianSourcePolicy,
    transport: Transport<'_>,
    states: &DenseArray,
    t_grid: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<AdvantageCurve> {
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(QflowError::InvalidArgument("t grid must be ascending within [0, 1]".into()));
    }
    if samples == 0 || states.rows() == 0 {
        return Err(QflowError::InvalidArgument("advantage curve needs states and samples".into()));
    }
    let expanded = repeat_each(states, samples);
    let a0 = source.sample_source(&expanded, rng)?;
    let total = transport.total_steps();
    let budgets: Vec<usize> = t_grid.iter().map(|&t| step_budget(t, total)).collect();
    let max_budget = budgets.iter().copied().max().unwrap_or(0);
    // q_by_step[n] holds per-sample values after n transport steps
    let mut q_by_step: Vec<Option<Vec<f64>>> = vec![None; max_budget + 1];
    let q0 = critic.values(&expanded, &a0)?;
    q_by_step[0] = Some(q0.clone());
    let mut record = |n: usize, a: &DenseArray| -> Result<()> {
        if n <= max_budget && budgets.contains(&n) {
            q_by_step[n] = Some(critic.values(&expanded, a)?);
        }
        Ok(())
    };
    match transport {
        Transport::Ascent { eta, .. } => {
            ascend_with_trace(critic, &expanded, &a0, max_budget, eta, &mut record)?;
        }
        Transport::Field { model, ode_steps } => {
            let dt = 1.0 / ode_steps as f64;
            let mut a = a0.clone();
            let mut times = vec![0.0; a.rows()];
            for k in 0..max_budget {
                times.iter_mut().for_each(|t| *t = k as f64 * dt);
                let v = model.velocity(&times, &expanded, &a)?;
                a.axpy(dt, &v)?;
                record(k + 1, &a)?;
            }
        }
    }
    let diffs: Vec<Vec<f64>> = budgets
        .iter()
        .map(|&n| {
            let q = q_by_step[n].as_ref().expect("recorded every budget");
            q.iter().zip(&q0).map(|(a, b)| a - b).collect()
        })
        .collect();
    let (values, std_errors) = diffs.iter().map(|d| mean_and_se(d)).unzip();
    let increment_std_errors = diffs
        .windows(2)
        .map(|w| {
            let inc: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
            mean_and_se(&inc).1
        })
        .collect();
    Ok(AdvantageCurve {
        t_grid: t_grid.to_vec(),
        values,
        std_errors,
        increment_std_errors,
    })
}

/// Each row repeated `times` times consecutively.
pub fn repeat_each(rows: &DenseArray, times: usize) -> DenseArray {
    let idx: Vec<usize> = (0..rows.rows()).flat_map(|i| std::iter::repeat_n(i, times)).collect();
    rows.select_rows(&idx)
}
