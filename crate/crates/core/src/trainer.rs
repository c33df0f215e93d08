//! The training loop: synchronous parallel rollouts, replay, and one critic, source and
//! flow update per parallel step once warm.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{Agent, AgentConfig, CheckpointMeta, ExplorationMode};
use crate::array::DenseArray;
use crate::critic::ActionValue;
use crate::envs::{ChainConfig, EnvConfig, Environment, RedundantConfig};
use crate::error::{QflowError, Result};
use crate::flow::{construct_targets, sample_flow_action, transport, VelocityModel};
use crate::nn::Mode;
use crate::replay::{Behavior, ReplayBuffer, Transition, DEFAULT_CAPACITY, DEFAULT_WARMUP};
use crate::source_policy::GaussianSourcePolicy;

pub const METRICS_HEADER: [&str; 9] = [
    "env_steps",
    "mean_return",
    "std_return",
    "critic_loss",
    "actor_loss",
    "flow_loss",
    "superiority_ratio",
    "clamp_rate",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub parallel_envs: usize,
    /// Counted over all parallel environments.
    pub total_env_steps: u64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub warmup: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub exploration: ExplorationMode,
    pub seed: u64,
    /// Pair the flow and source actions through one shared source draw in the ratio.
    pub superiority_shared_source: bool,
    /// Record elapsed seconds; when off the column is written as 0 for reproducible files.
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::Redundant(RedundantConfig::with_actuators(32)),
            agent: AgentConfig::default(),
            parallel_envs: 8,
            total_env_steps: 150_000,
            batch_size: 256,
            buffer_size: DEFAULT_CAPACITY,
            warmup: DEFAULT_WARMUP,
            eval_every: 5_000,
            eval_episodes: 5,
            exploration: ExplorationMode::Flow,
            seed: 0,
            superiority_shared_source: false,
            wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn chain(num_joints: usize) -> Self {
        Self {
            env: EnvConfig::Chain(ChainConfig::with_joints(num_joints)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.parallel_envs", self.parallel_envs as u64),
            ("train.total_env_steps", self.total_env_steps),
            ("train.batch_size", self.batch_size as u64),
            ("train.buffer_size", self.buffer_size as u64),
            ("train.eval_every", self.eval_every),
            ("train.eval_episodes", self.eval_episodes as u64),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(QflowError::config(key, "must be positive"));
            }
        }
        self.agent.critic.validate()?;
        self.agent.policy.validate()?;
        self.agent.field.validate()?;
        self.agent.flow.validate()?;
        match &self.env {
            EnvConfig::Chain(c) => c.validate(),
            EnvConfig::Redundant(c) => c.validate(),
        }
    }
}

/// One logging interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub env_steps: u64,
    pub mean_return: f64,
    pub std_return: f64,
    /// Interval means; NaN before the first update.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub flow_loss: f64,
    pub superiority_ratio: f64,
    /// Fraction of behavior-action components moved by the final clamp.
    pub clamp_rate: f64,
    pub wall_seconds: f64,
    /// Mean `q_min(a1) − q_min(a0)` of the last flow targets; NaN when none were built.
    pub advantage_at_one: f64,
}

impl TrainRecord {
    fn csv_fields(&self) -> [String; 9] {
        [
            self.env_steps.to_string(),
            fmt_f64(self.mean_return),
            fmt_f64(self.std_return),
            fmt_f64(self.critic_loss),
            fmt_f64(self.actor_loss),
            fmt_f64(self.flow_loss),
            fmt_f64(self.superiority_ratio),
            fmt_f64(self.clamp_rate),
            fmt_f64(self.wall_seconds),
        ]
    }
}

/// Shortest text that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpdateCounters {
    pub parallel_steps: u64,
    pub warm_parallel_steps: u64,
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub flow_updates: u64,
    pub stored_transitions: u64,
    /// Stored transitions whose behavior tag differs from the configured mode.
    pub foreign_behavior: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub counters: UpdateCounters,
    pub exploration: ExplorationMode,
}

impl TrainReport {
    pub fn final_return(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_return)
    }

    /// Trapezoidal area under (env_steps, mean_return), divided by the step span.
    pub fn area_under_curve(&self) -> f64 {
        let r = &self.records;
        match r.len() {
            0 => f64::NAN,
            1 => r[0].mean_return,
            _ => {
                let span = (r[r.len() - 1].env_steps - r[0].env_steps) as f64;
                let area: f64 = r
                    .windows(2)
                    .map(|w| 0.5 * (w[0].mean_return + w[1].mean_return) * (w[1].env_steps - w[0].env_steps) as f64)
                    .sum();
                area / span
            }
        }
    }

    /// Mean superiority ratio over records whose step lies in the last `fraction` of training.
    pub fn late_superiority(&self, total_env_steps: u64, fraction: f64) -> f64 {
        let cutoff = total_env_steps as f64 * (1.0 - fraction);
        let late: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.env_steps as f64 > cutoff && r.superiority_ratio.is_finite())
            .map(|r| r.superiority_ratio)
            .collect();
        late.iter().sum::<f64>() / late.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| QflowError::InvalidArgument(format!("metrics csv: {e}"));
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.write_record(r.csv_fields()).map_err(csv_err)?;
        }
        w.flush().map_err(|e| QflowError::io("metrics csv", e))
    }
}

/// Return statistics over evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturnStats {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub returns: Vec<f64>,
}

impl ReturnStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            episodes: returns.len(),
            mean,
            std,
            min: returns.iter().copied().fold(f64::INFINITY, f64::min),
            max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            returns,
        }
    }
}

/// Runs `episodes` full episodes with deterministic flow actions; episode `k` is reset
/// with seed `seed + k`. All episodes are stepped together as one batch.
pub fn evaluate(agent: &Agent, env: &EnvConfig, episodes: usize, seed: u64) -> Result<ReturnStats> {
    if episodes == 0 {
        return Err(QflowError::config("eval.episodes", "must be positive"));
    }
    let mut envs = (0..episodes).map(|_| env.build()).collect::<Result<Vec<_>>>()?;
    let mut obs: Vec<Vec<f64>> = envs.iter_mut().enumerate().map(|(k, e)| e.reset(seed + k as u64)).collect();
    let mut returns = vec![0.0; episodes];
    let mut active = vec![true; episodes];
    // deterministic sampling draws no randomness; the generator is only a placeholder
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while active.iter().any(|&a| a) {
        let live: Vec<usize> = (0..episodes).filter(|&k| active[k]).collect();
        let states = DenseArray::from_rows(&live.iter().map(|&k| obs[k].clone()).collect::<Vec<_>>())?;
        let actions = sample_flow_action(&agent.field, &agent.source, &states, &mut rng, true, &agent.flow)?.actions;
        for (row, &k) in live.iter().enumerate() {
            let step = envs[k].step(actions.row(row))?;
            returns[k] += step.reward;
            obs[k] = step.next_observation;
            if step.terminal {
                active[k] = false;
            }
        }
    }
    Ok(ReturnStats::from_returns(returns))
}

/// Per-state flags `q_min(s, a_flow) > q_min(s, a_source)`.
pub fn superiority_flags<R: Rng + ?Sized>(
    critic: &dyn ActionValue,
    source: &GaussianSourcePolicy,
    field: &dyn VelocityModel,
    states: &DenseArray,
    rng: &mut R,
    shared_source: bool,
    flow: &crate::flow::FlowConfig,
) -> Result<Vec<bool>> {
    if states.rows() == 0 {
        return Err(QflowError::InvalidArgument("superiority ratio needs a nonempty batch".into()));
    }
    let source_actions = source.sample_source(states, rng)?;
    let flow_actions = if shared_source {
        transport(field, states, source_actions.clone(), flow)?.actions
    } else {
        sample_flow_action(field, source, states, rng, false, flow)?.actions
    };
    let q_flow = critic.values(states, &flow_actions)?;
    let q_src = critic.values(states, &source_actions)?;
    Ok(q_flow.iter().zip(&q_src).map(|(f, s)| f > s).collect())
}

/// Fraction of states whose flow action beats the source action under the critic.
pub fn flow_superiority_ratio<R: Rng + ?Sized>(
    critic: &dyn ActionValue,
    source: &GaussianSourcePolicy,
    field: &dyn VelocityModel,
    states: &DenseArray,
    rng: &mut R,
    shared_source: bool,
    flow: &crate::flow::FlowConfig,
) -> Result<f64> {
    let flags = superiority_flags(critic, source, field, states, rng, shared_source, flow)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Where the trainer writes metrics and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Resolved configuration embedded in every checkpoint manifest.
    pub resolved_config: BTreeMap<String, String>,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Counters and running sums for one logging interval.
#[derive(Default)]
struct Interval {
    critic: (f64, u64),
    actor: (f64, u64),
    flow: (f64, u64),
    clamped: u64,
    components: u64,
}

fn mean_of((sum, n): (f64, u64)) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Derives independent generator streams from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn train(config: &TrainConfig) -> Result<(TrainReport, Agent)> {
    train_with_output(config, None)
}

/// Full training run. With an output, writes `metrics.csv` and `ckpt_<step>/` at every
/// evaluation point; a non-finite loss halts the run after writing `nan_snapshot/`.
pub fn train_with_output(config: &TrainConfig, output: Option<&RunOutput>) -> Result<(TrainReport, Agent)> {
    config.validate()?;
    let started = Instant::now();
    let mut init_rng = stream(config.seed, 1);
    let mut act_rng = stream(config.seed, 2);
    let mut update_rng = stream(config.seed, 3);
    let mut ratio_rng = stream(config.seed, 4);

    let mut envs = (0..config.parallel_envs).map(|_| config.env.build()).collect::<Result<Vec<_>>>()?;
    let state_dim = envs[0].observation_dim();
    let action_dim = envs[0].action_dim();
    let mut agent = Agent::new(state_dim, action_dim, &config.agent, &mut init_rng)?;
    let mut replay = ReplayBuffer::new(config.buffer_size, state_dim, action_dim, config.warmup)?;
    let behavior = match config.exploration {
        ExplorationMode::Flow => Behavior::Flow,
        ExplorationMode::Gaussian => Behavior::Gaussian,
    };

    let mut episode_counter: u64 = 0;
    let next_episode_seed = |counter: &mut u64| {
        let s = config.seed.wrapping_mul(1_000_003).wrapping_add(*counter);
        *counter += 1;
        s
    };
    let mut obs: Vec<Vec<f64>> = envs.iter_mut().map(|e| e.reset(next_episode_seed(&mut episode_counter))).collect();

    let mut report = TrainReport {
        records: Vec::new(),
        counters: UpdateCounters::default(),
        exploration: config.exploration,
    };
    let mut interval = Interval::default();
    let mut last_advantage = f64::NAN;
    let mut env_steps: u64 = 0;
    let mut next_log = config.eval_every.min(config.total_env_steps);

    while env_steps < config.total_env_steps {
        let states = DenseArray::from_rows(&obs)?;
        let sample = agent.act(&states, &mut act_rng, false, config.exploration)?;
        interval.clamped += sample.clamped as u64;
        interval.components += sample.actions.data().len() as u64;
        for (k, env) in envs.iter_mut().enumerate() {
            let step = env.step(sample.actions.row(k))?;
            let time_limit = step.is_time_limit();
            replay.push(Transition {
                state: obs[k].clone(),
                action: sample.actions.row(k).to_vec(),
                reward: step.reward,
                next_state: step.next_observation.clone(),
                // horizon truncation is not a true terminal state
                terminal: step.terminal && !time_limit,
                behavior,
            })?;
            report.counters.stored_transitions += 1;
            obs[k] = if step.terminal {
                env.reset(next_episode_seed(&mut episode_counter))
            } else {
                step.next_observation
            };
        }
        env_steps += config.parallel_envs as u64;
        report.counters.parallel_steps += 1;

        if replay.is_warm(config.batch_size) {
            report.counters.warm_parallel_steps += 1;
            let step_result = update_step(&mut agent, &replay, config, &mut update_rng, &mut report.counters);
            match step_result {
                Ok(losses) => {
                    interval.critic.0 += losses.critic;
                    interval.critic.1 += 1;
                    interval.actor.0 += losses.actor;
                    interval.actor.1 += 1;
                    if let Some((flow_loss, adv)) = losses.flow {
                        interval.flow.0 += flow_loss;
                        interval.flow.1 += 1;
                        last_advantage = adv;
                    }
                }
                Err(e @ QflowError::NonFinite(_)) => {
                    if let Some(out) = output {
                        write_nan_snapshot(out, &agent, env_steps, &e)?;
                    }
                    return Err(QflowError::NonFinite(format!("{e} at env step {env_steps}")));
                }
                Err(e) => return Err(e),
            }
        }

        if env_steps >= next_log || env_steps >= config.total_env_steps {
            let stats = evaluate(&agent, &config.env, config.eval_episodes, config.seed.wrapping_add(0x5eed_0000))?;
            let ratio = if replay.is_warm(config.batch_size) {
                let batch = replay.sample(config.batch_size, &mut ratio_rng)?;
                flow_superiority_ratio(
                    &agent.critic,
                    &agent.source,
                    &agent.field,
                    &batch.states,
                    &mut ratio_rng,
                    config.superiority_shared_source,
                    &agent.flow,
                )?
            } else {
                f64::NAN
            };
            report.records.push(TrainRecord {
                env_steps,
                mean_return: stats.mean,
                std_return: stats.std,
                critic_loss: mean_of(interval.critic),
                actor_loss: mean_of(interval.actor),
                flow_loss: mean_of(interval.flow),
                superiority_ratio: ratio,
                clamp_rate: interval.clamped as f64 / interval.components.max(1) as f64,
                wall_seconds: if config.wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
                advantage_at_one: last_advantage,
            });
            interval = Interval::default();
            if let Some(out) = output {
                write_metrics(out, &report)?;
                let meta = CheckpointMeta {
                    env_steps,
                    config: out.resolved_config.clone(),
                };
                agent.save(&out.dir.join(format!("ckpt_{env_steps}")), &meta)?;
            }
            while next_log <= env_steps {
                next_log += config.eval_every;
            }
        }
    }
    report.counters.foreign_behavior = count_foreign_behavior(&replay, config.exploration);
    Ok((report, agent))
}

struct StepLosses {
    critic: f64,
    actor: f64,
    /// Flow loss and mean advantage of the targets, absent in Gaussian mode.
    flow: Option<(f64, f64)>,
}

fn update_step(
    agent: &mut Agent,
    replay: &ReplayBuffer,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    counters: &mut UpdateCounters,
) -> Result<StepLosses> {
    let batch = replay.sample(config.batch_size, rng)?;
    let next_actions = agent.act(&batch.next_states, rng, false, config.exploration)?.actions;
    let critic = agent.critic.critic_update(&batch, &next_actions)?;
    counters.critic_updates += 1;
    let actor = agent.source.source_update(&agent.critic, &batch.states, rng)?;
    counters.actor_updates += 1;
    let flow = match config.exploration {
        ExplorationMode::Flow => {
            let (a0, a1) = construct_targets(&agent.critic, &agent.source, &batch.states, rng, &agent.flow)?;
            let q0 = agent.critic.q_min(&batch.states, &a0, Mode::Eval)?;
            let q1 = agent.critic.q_min(&batch.states, &a1, Mode::Eval)?;
            let adv = q1.iter().zip(&q0).map(|(a, b)| a - b).sum::<f64>() / q0.len() as f64;
            let loss = agent.field.flow_matching_update(&batch.states, &a0, &a1, rng)?;
            counters.flow_updates += 1;
            Some((loss, adv))
        }
        ExplorationMode::Gaussian => None,
    };
    Ok(StepLosses { critic, actor, flow })
}

fn write_metrics(out: &RunOutput, report: &TrainReport) -> Result<()> {
    std::fs::create_dir_all(&out.dir).map_err(|e| QflowError::io(&out.dir, e))?;
    let path = out.dir.join(METRICS_FILE);
    let file = std::fs::File::create(&path).map_err(|e| QflowError::io(&path, e))?;
    report.write_csv(std::io::BufWriter::new(file))
}

fn write_nan_snapshot(out: &RunOutput, agent: &Agent, env_steps: u64, err: &QflowError) -> Result<()> {
    let dir: PathBuf = out.dir.join("nan_snapshot");
    agent.save(
        &dir,
        &CheckpointMeta {
            env_steps,
            config: out.resolved_config.clone(),
        },
    )?;
    let info = serde_json::json!({ "env_steps": env_steps, "error": err.to_string() });
    let path = dir.join("diagnostic.json");
    std::fs::write(&path, serde_json::to_string_pretty(&info).expect("json")).map_err(|e| QflowError::io(path, e))
}

/// Reads the transitions' behavior tags back and counts any that disagree with `mode`.
pub fn count_foreign_behavior(replay: &ReplayBuffer, mode: ExplorationMode) -> u64 {
    let want = match mode {
        ExplorationMode::Flow => Behavior::Flow,
        ExplorationMode::Gaussian => Behavior::Gaussian,
    };
    replay.iter().filter(|t| t.behavior != want).count() as u64
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join(METRICS_FILE)
}
