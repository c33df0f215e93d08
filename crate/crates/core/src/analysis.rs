//! Standalone experiments: end-effector variance scaling under isotropic action noise,
//! monotonicity of the advantage curve, and correlation structure of flow actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::agent::Agent;
use crate::array::DenseArray;
use crate::critic::{ActionValue, CriticConfig, QuadraticCritic, TwinCritic, ZeroCritic};
use crate::envs::{forward_kinematics, ChainConfig, EnvConfig, Environment};
use crate::error::{QflowError, Result};
use crate::flow::{advantage_curve, repeat_each, sample_flow_action, FlowConfig, Transport, VelocityModel};
use crate::nn::Activation;
use crate::source_policy::{GaussianSourcePolicy, PolicyConfig};

/// Which angles receive the i.i.d. noise in the variance experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// Absolute link orientations: each noise coordinate rotates exactly one link.
    Link,
    /// Relative joint angles: noise on joint `j` rotates every link after it.
    Joint,
}

impl Perturbation {
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "link" => Some(Perturbation::Link),
            "joint" => Some(Perturbation::Joint),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Perturbation::Link => "link",
            Perturbation::Joint => "joint",
        }
    }

    /// First-order trace of the end-effector covariance around the straight chain.
    pub fn first_order_variance(self, dim: usize, sigma: f64, length: f64) -> f64 {
        let a = dim as f64;
        match self {
            Perturbation::Link => sigma * sigma * length * length / a,
            // Σ_k (k l)² with l = L / |A|
            Perturbation::Joint => sigma * sigma * length * length * (a + 1.0) * (2.0 * a + 1.0) / (6.0 * a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceParams {
    pub dims: Vec<usize>,
    pub sigma: f64,
    pub length: f64,
    pub samples: usize,
    pub seed: u64,
    pub perturbation: Perturbation,
}

impl Default for VarianceParams {
    fn default() -> Self {
        Self {
            dims: vec![2, 4, 8, 16, 32, 64],
            sigma: 0.05,
            length: 1.0,
            samples: 1_000_000,
            seed: 0,
            perturbation: Perturbation::Link,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceScalingResult {
    pub dims: Vec<usize>,
    /// Trace of the sample covariance of the end-effector, per dim.
    pub empirical_variance: Vec<f64>,
    /// `σ² L² / |A|` per dim.
    pub theoretical: Vec<f64>,
    /// First-order prediction of the chosen perturbation model.
    pub first_order: Vec<f64>,
    pub loglog_slope: f64,
    pub perturbation: Perturbation,
    pub sigma: f64,
    pub length: f64,
    pub samples: usize,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// End-effector of the straight chain with the given noise applied under `model`.
fn perturbed_tip(noise: &[f64], config: &ChainConfig, model: Perturbation) -> Result<[f64; 2]> {
    match model {
        Perturbation::Joint => forward_kinematics(noise, config),
        Perturbation::Link => {
            let l = config.link_length();
            let mut p = [0.0, 0.0];
            for &theta in noise {
                p[0] += l * theta.cos();
                p[1] += l * theta.sin();
            }
            Ok(p)
        }
    }
}

pub fn variance_scaling_experiment(params: &VarianceParams) -> Result<VarianceScalingResult> {
    if params.dims.is_empty() || params.dims.windows(2).any(|w| w[1] <= w[0]) || params.dims[0] == 0 {
        return Err(QflowError::config("analysis.dims", "must be positive and strictly increasing"));
    }
    if !(params.sigma >= 0.0 && params.sigma.is_finite()) {
        return Err(QflowError::config("analysis.sigma", "must be non-negative"));
    }
    if params.samples < 2 {
        return Err(QflowError::config("analysis.samples", "need at least two samples"));
    }
    let normal = Normal::new(0.0, params.sigma).map_err(|e| QflowError::config("analysis.sigma", e.to_string()))?;
    let mut empirical = Vec::with_capacity(params.dims.len());
    for (idx, &dim) in params.dims.iter().enumerate() {
        let config = ChainConfig {
            total_length: params.length,
            ..ChainConfig::with_joints(dim)
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(idx as u64);
        let reference = perturbed_tip(&vec![0.0; dim], &config, params.perturbation)?;
        let mut noise = vec![0.0; dim];
        let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..params.samples {
            noise.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            let p = perturbed_tip(&noise, &config, params.perturbation)?;
            // shifted sums keep the variance of tiny displacements accurate
            let (dx, dy) = (p[0] - reference[0], p[1] - reference[1]);
            sx += dx;
            sy += dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let n = params.samples as f64;
        let var = (sxx - sx * sx / n) / (n - 1.0) + (syy - sy * sy / n) / (n - 1.0);
        empirical.push(var.max(0.0));
    }
    let dims_f: Vec<f64> = params.dims.iter().map(|&d| d as f64).collect();
    let slope = if params.dims.len() >= 2 && empirical.iter().all(|&v| v > 0.0) {
        loglog_slope(&dims_f, &empirical)
    } else {
        f64::NAN
    };
    Ok(VarianceScalingResult {
        theoretical: params
            .dims
            .iter()
            .map(|&d| Perturbation::Link.first_order_variance(d, params.sigma, params.length))
            .collect(),
        first_order: params
            .dims
            .iter()
            .map(|&d| params.perturbation.first_order_variance(d, params.sigma, params.length))
            .collect(),
        dims: params.dims.clone(),
        empirical_variance: empirical,
        loglog_slope: slope,
        perturbation: params.perturbation,
        sigma: params.sigma,
        length: params.length,
        samples: params.samples,
    })
}

/// Which critic the monotonicity experiment ascends.
#[derive(Debug, Clone)]
pub enum CriticSource {
    /// `Q = −½‖a − a*‖²` with a seeded random optimum inside the box.
    Quadratic,
    /// Freshly initialized tanh twin critic.
    RandomNet { hidden: Vec<usize> },
    /// Critic and source of a trained agent; states come from a short rollout.
    Checkpoint { agent: Box<Agent>, env: EnvConfig },
    Zero,
}

impl CriticSource {
    pub fn tag(&self) -> &'static str {
        match self {
            CriticSource::Quadratic => "quadratic",
            CriticSource::RandomNet { .. } => "random-net",
            CriticSource::Checkpoint { .. } => "checkpoint",
            CriticSource::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityParams {
    pub state_dim: usize,
    pub action_dim: usize,
    pub num_states: usize,
    pub grid_points: usize,
    pub samples: usize,
    pub ascent_steps: usize,
    pub eta: f64,
    pub seed: u64,
    /// Fixed tolerance for the exact (quadratic or zero) modes.
    pub exact_tolerance: f64,
    /// Standard errors allowed per increment in the statistical modes.
    pub se_multiplier: f64,
}

impl Default for MonotonicityParams {
    fn default() -> Self {
        Self {
            state_dim: 4,
            action_dim: 8,
            num_states: 64,
            grid_points: 21,
            samples: 256,
            ascent_steps: 20,
            eta: 0.01,
            seed: 0,
            exact_tolerance: 1e-6,
            se_multiplier: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityResult {
    pub mode: String,
    pub t_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Allowed decrease between consecutive grid points.
    pub tolerances: Vec<f64>,
    /// Grid indices `k` with `F(t_{k+1}) < F(t_k) − tol_k`.
    pub violations: Vec<usize>,
    pub pass: bool,
}

pub fn uniform_grid(points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![0.0];
    }
    (0..points).map(|k| k as f64 / (points - 1) as f64).collect()
}

fn random_states(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseArray::new(rows, cols, data).expect("uniform draws are finite")
}

/// Probe states from one stochastic rollout of the agent's flow policy.
pub fn rollout_states(agent: &Agent, env: &EnvConfig, count: usize, seed: u64) -> Result<DenseArray> {
    let mut e = env.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = e.reset(seed);
    let mut rows = Vec::with_capacity(count);
    while rows.len() < count {
        rows.push(obs.clone());
        let s = DenseArray::row_vector(&obs)?;
        let a = sample_flow_action(&agent.field, &agent.source, &s, &mut rng, false, &agent.flow)?.actions;
        let step = e.step(a.row(0))?;
        obs = if step.terminal { e.reset(seed.wrapping_add(rows.len() as u64)) } else { step.next_observation };
    }
    DenseArray::from_rows(&rows)
}

pub fn monotonicity_experiment(source: &CriticSource, params: &MonotonicityParams) -> Result<MonotonicityResult> {
    if params.num_states == 0 || params.samples == 0 {
        return Err(QflowError::config("analysis.samples", "must be positive"));
    }
    if !(params.eta > 0.0) || params.ascent_steps == 0 {
        return Err(QflowError::config("analysis.eta", "eta and ascent steps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let grid = uniform_grid(params.grid_points);
    let transport = Transport::Ascent {
        steps: params.ascent_steps,
        eta: params.eta,
    };
    let small_policy = PolicyConfig {
        hidden: vec![32, 32],
        ..PolicyConfig::default()
    };
    let (sd, ad) = (params.state_dim, params.action_dim);
    let (curve, exact) = match source {
        CriticSource::Quadratic | CriticSource::Zero => {
            let policy = GaussianSourcePolicy::new(sd, ad, &small_policy, &mut rng)?;
            let states = random_states(params.num_states, sd, &mut rng);
            let critic: Box<dyn ActionValue> = match source {
                CriticSource::Quadratic => Box::new(QuadraticCritic::new((0..ad).map(|_| rng.random_range(-0.8..0.8)).collect())),
                _ => Box::new(ZeroCritic { action_dim: ad }),
            };
            (advantage_curve(critic.as_ref(), &policy, transport, &states, &grid, params.samples, &mut rng)?, true)
        }
        CriticSource::RandomNet { hidden } => {
            let cfg = CriticConfig {
                hidden: hidden.clone(),
                activation: Activation::Tanh,
                ..CriticConfig::default()
            };
            let critic = TwinCritic::new(sd, ad, &cfg, &mut rng)?;
            let policy = GaussianSourcePolicy::new(sd, ad, &small_policy, &mut rng)?;
            let states = random_states(params.num_states, sd, &mut rng);
            (advantage_curve(&critic, &policy, transport, &states, &grid, params.samples, &mut rng)?, false)
        }
        CriticSource::Checkpoint { agent, env } => {
            let states = rollout_states(agent, env, params.num_states, params.seed)?;
            (advantage_curve(&agent.critic, &agent.source, transport, &states, &grid, params.samples, &mut rng)?, false)
        }
    };
    let tolerances: Vec<f64> = if exact {
        vec![params.exact_tolerance; grid.len().saturating_sub(1)]
    } else {
        curve.increment_std_errors.iter().map(|se| params.se_multiplier * se).collect()
    };
    let violations: Vec<usize> = (0..tolerances.len())
        .filter(|&k| curve.values[k + 1] < curve.values[k] - tolerances[k])
        .collect();
    Ok(MonotonicityResult {
        mode: source.tag().to_string(),
        t_grid: curve.t_grid,
        values: curve.values,
        std_errors: curve.std_errors,
        pass: violations.is_empty(),
        tolerances,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationResult {
    /// Per-dimension standard deviation, averaged over probe states.
    pub stds: Vec<f64>,
    /// Pearson correlation matrix averaged over probe states, row-major `|A| × |A|`.
    pub correlation: DenseArray,
    /// Dimensions that had zero variance at some probe state; their correlations are 0.
    pub zero_variance: Vec<bool>,
    pub probe_states: usize,
    pub samples_per_state: usize,
}

/// Standard deviations and Pearson correlations of the rows of `samples`.
pub fn sample_correlation(samples: &DenseArray) -> (Vec<f64>, DenseArray, Vec<bool>) {
    let (n, d) = samples.shape();
    let mut mean = vec![0.0; d];
    for r in samples.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in samples.iter_rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let std: Vec<f64> = (0..d).map(|i| (cov[i * d + i] / denom).sqrt()).collect();
    let zero: Vec<bool> = std.iter().map(|&s| s == 0.0).collect();
    let mut corr = DenseArray::zeros(d, d);
    for i in 0..d {
        corr.set(i, i, 1.0);
        for j in i + 1..d {
            let c = if zero[i] || zero[j] {
                0.0
            } else {
                (cov[i * d + j] / denom / (std[i] * std[j])).clamp(-1.0, 1.0)
            };
            corr.set(i, j, c);
            corr.set(j, i, c);
        }
    }
    (std, corr, zero)
}

/// Correlation structure of flow actions at the given states, averaged over states.
pub fn action_correlation(
    field: &dyn VelocityModel,
    source: &GaussianSourcePolicy,
    states: &DenseArray,
    samples_per_state: usize,
    flow: &FlowConfig,
    seed: u64,
) -> Result<CorrelationResult> {
    if samples_per_state < 2 || states.rows() == 0 {
        return Err(QflowError::config("analysis.samples", "need at least two samples and one state"));
    }
    let d = source.action_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expanded = repeat_each(states, samples_per_state);
    let actions = sample_flow_action(field, source, &expanded, &mut rng, false, flow)?.actions;
    let mut stds = vec![0.0; d];
    let mut corr = DenseArray::zeros(d, d);
    let mut zero = vec![false; d];
    let k = states.rows() as f64;
    for s in 0..states.rows() {
        let block = actions.slice_rows(s * samples_per_state, (s + 1) * samples_per_state);
        let (sd, c, z) = sample_correlation(&block);
        for j in 0..d {
            stds[j] += sd[j] / k;
            zero[j] |= z[j];
        }
        corr.axpy(1.0 / k, &c)?;
    }
    for i in 0..d {
        corr.set(i, i, 1.0);
    }
    Ok(CorrelationResult {
        stds,
        correlation: corr,
        zero_variance: zero,
        probe_states: states.rows(),
        samples_per_state,
    })
}

/// Probe states from a short rollout of the agent, then [`action_correlation`].
pub fn correlation_experiment(
    agent: &Agent,
    env: &EnvConfig,
    states_per_point: usize,
    samples_per_state: usize,
    seed: u64,
) -> Result<CorrelationResult> {
    let states = rollout_states(agent, env, states_per_point, seed)?;
    action_correlation(&agent.field, &agent.source, &states, samples_per_state, &agent.flow, seed.wrapping_add(1))
}
