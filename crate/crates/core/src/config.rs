//! Flat `section.key = value` run configuration with strict key checking.
//!
//! Every recognized key is listed in [`RunConfig::resolved`]; writing that map back out
//! and parsing it again reproduces the same configuration exactly.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agent::ExplorationMode;
use crate::analysis::{MonotonicityParams, Perturbation, VarianceParams};
use crate::envs::{ChainConfig, EnvConfig, RedundantConfig};
use crate::error::{QflowError, Result};
use crate::nn::BatchNormSettings;
use crate::trainer::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

/// Transport preconditioner. Only the identity is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    #[default]
    Identity,
}

/// Critic family for the monotonicity experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MonotonicityCritic {
    #[default]
    Quadratic,
    RandomNet,
    Checkpoint,
    Zero,
}

impl MonotonicityCritic {
    pub fn tag(self) -> &'static str {
        match self {
            MonotonicityCritic::Quadratic => "quadratic",
            MonotonicityCritic::RandomNet => "random-net",
            MonotonicityCritic::Checkpoint => "checkpoint",
            MonotonicityCritic::Zero => "zero",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        [Self::Quadratic, Self::RandomNet, Self::Checkpoint, Self::Zero]
            .into_iter()
            .find(|m| m.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub variance: VarianceParams,
    pub monotonicity: MonotonicityParams,
    pub critic: MonotonicityCritic,
    pub critic_hidden: Vec<usize>,
    pub checkpoint: Option<PathBuf>,
    pub probe_states: usize,
    pub samples_per_state: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            variance: VarianceParams::default(),
            monotonicity: MonotonicityParams::default(),
            critic: MonotonicityCritic::default(),
            critic_hidden: vec![64, 64],
            checkpoint: None,
            probe_states: 16,
            samples_per_state: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub preconditioner: Preconditioner,
    /// Falls back to `QFLOW_OUTDIR`, then `runs/`, when unset.
    pub output_dir: Option<PathBuf>,
    /// Also emit SVG line charts next to the CSV files.
    pub svg: bool,
}

/// Splits config text into `key -> value`, rejecting malformed and repeated lines.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| QflowError::config(format!("line {}", no + 1), "expected `key = value`"))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(QflowError::config(format!("line {}", no + 1), "empty key"));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(QflowError::config(key, "given more than once"));
        }
    }
    Ok(out)
}

/// Parses one `key=value` command-line override.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| QflowError::config(text, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| QflowError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| scalar(key, p.trim())).collect()
}

fn join<T: Debug>(values: &[T]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn num<T: Debug>(v: T) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QflowError::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    /// Parses config text, then applies overrides in order; later values win.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for (k, v) in overrides {
            pairs.insert(k.clone(), v.clone());
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // the env kind decides which env keys exist, so it goes first
        if let Some(kind) = pairs.get("env.kind") {
            cfg.train.env = match kind.as_str() {
                "chain" => EnvConfig::Chain(ChainConfig::with_joints(32)),
                "redundant" => EnvConfig::Redundant(RedundantConfig::with_actuators(32)),
                other => return Err(QflowError::config("env.kind", format!("unknown kind `{other}` (chain|redundant)"))),
            };
        }
        for (key, value) in pairs {
            if key != "env.kind" {
                cfg.apply(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let a = &mut self.analysis;
        match key {
            "env.num_actuators" => {
                let n = scalar(key, v)?;
                match &mut t.env {
                    EnvConfig::Chain(c) => c.num_joints = n,
                    EnvConfig::Redundant(c) => c.num_actuators = n,
                }
            }
            "env.horizon" => {
                let h = scalar(key, v)?;
                match &mut t.env {
                    EnvConfig::Chain(c) => c.episode_horizon = h,
                    EnvConfig::Redundant(c) => c.episode_horizon = h,
                }
            }
            "env.randomize_goal" => {
                let b = scalar(key, v)?;
                match &mut t.env {
                    EnvConfig::Chain(c) => c.randomize_goal = b,
                    EnvConfig::Redundant(c) => c.randomize_goal = b,
                }
            }
            "env.goal" => {
                let g: Vec<f64> = list(key, v)?;
                match &mut t.env {
                    EnvConfig::Chain(c) => {
                        c.goal = g
                            .try_into()
                            .map_err(|_| QflowError::config(key, "chain goal needs two coordinates"))?
                    }
                    EnvConfig::Redundant(c) => c.goal = g,
                }
            }
            "env.total_length" | "env.angle_rate" => {
                let EnvConfig::Chain(c) = &mut t.env else {
                    return Err(QflowError::config(key, "only valid with env.kind = chain"));
                };
                let x = scalar(key, v)?;
                if key == "env.total_length" {
                    c.total_length = x;
                } else {
                    c.angle_rate = x;
                }
            }
            "env.dof" | "env.mixing_seed" | "env.action_cost" | "env.dt" | "env.damping" | "env.force_gain" => {
                let EnvConfig::Redundant(c) = &mut t.env else {
                    return Err(QflowError::config(key, "only valid with env.kind = redundant"));
                };
                match key {
                    "env.dof" => c.dof = scalar(key, v)?,
                    "env.mixing_seed" => c.mixing_seed = scalar(key, v)?,
                    "env.action_cost" => c.action_cost = scalar(key, v)?,
                    "env.dt" => c.dt = scalar(key, v)?,
                    "env.damping" => c.damping = scalar(key, v)?,
                    _ => c.force_gain = if v == "auto" { None } else { Some(scalar(key, v)?) },
                }
            }
            "train.parallel_envs" => t.parallel_envs = scalar(key, v)?,
            "train.total_env_steps" => t.total_env_steps = scalar(key, v)?,
            "train.batch_size" => t.batch_size = scalar(key, v)?,
            "train.buffer_size" => t.buffer_size = scalar(key, v)?,
            "train.warmup" => t.warmup = scalar(key, v)?,
            "train.eval_every" => t.eval_every = scalar(key, v)?,
            "train.eval_episodes" => t.eval_episodes = scalar(key, v)?,
            "train.exploration" => {
                t.exploration = ExplorationMode::from_tag(v)
                    .ok_or_else(|| QflowError::config(key, format!("unknown mode `{v}` (flow|gaussian)")))?
            }
            "train.seed" => t.seed = scalar(key, v)?,
            "train.superiority_shared_source" => t.superiority_shared_source = scalar(key, v)?,
            "train.wall_time" => t.wall_time = scalar(key, v)?,
            "train.discount" => t.agent.critic.discount = scalar(key, v)?,
            "train.learning_rate" => {
                let lr = scalar(key, v)?;
                t.agent.critic.learning_rate = lr;
                t.agent.policy.learning_rate = lr;
                t.agent.field.learning_rate = lr;
            }
            "network.critic_hidden" => t.agent.critic.hidden = list(key, v)?,
            "network.policy_hidden" => t.agent.policy.hidden = list(key, v)?,
            "network.flow_hidden" => t.agent.field.hidden = list(key, v)?,
            "network.critic_batch_norm" => {
                t.agent.critic.batch_norm = if scalar(key, v)? { Some(BatchNormSettings::default()) } else { None }
            }
            "network.policy_log_std" => {
                let b: Vec<f64> = list(key, v)?;
                let [lo, hi] = b[..] else {
                    return Err(QflowError::config(key, "expected `min,max`"));
                };
                t.agent.policy.log_std_bounds = (lo, hi);
            }
            "flow.ascent_steps" => t.agent.flow.ascent_steps = scalar(key, v)?,
            "flow.eta" => t.agent.flow.eta = scalar(key, v)?,
            "flow.ode_steps" => t.agent.flow.ode_steps = scalar(key, v)?,
            "flow.ode_dt" => t.agent.flow.ode_dt = scalar(key, v)?,
            "flow.preconditioner" => {
                if v != "identity" {
                    return Err(QflowError::config(key, "only `identity` is supported"));
                }
                self.preconditioner = Preconditioner::Identity;
            }
            "analysis.dims" => a.variance.dims = list(key, v)?,
            "analysis.sigma" => a.variance.sigma = scalar(key, v)?,
            "analysis.length" => a.variance.length = scalar(key, v)?,
            "analysis.variance_samples" => a.variance.samples = scalar(key, v)?,
            "analysis.perturbation" => {
                a.variance.perturbation =
                    Perturbation::from_tag(v).ok_or_else(|| QflowError::config(key, format!("unknown model `{v}` (link|joint)")))?
            }
            "analysis.seed" => {
                let s = scalar(key, v)?;
                a.variance.seed = s;
                a.monotonicity.seed = s;
            }
            "analysis.critic" => {
                a.critic = MonotonicityCritic::from_tag(v).ok_or_else(|| {
                    QflowError::config(key, format!("unknown critic `{v}` (quadratic|random-net|checkpoint|zero)"))
                })?
            }
            "analysis.critic_hidden" => a.critic_hidden = list(key, v)?,
            "analysis.state_dim" => a.monotonicity.state_dim = scalar(key, v)?,
            "analysis.action_dim" => a.monotonicity.action_dim = scalar(key, v)?,
            "analysis.num_states" => a.monotonicity.num_states = scalar(key, v)?,
            "analysis.grid_points" => a.monotonicity.grid_points = scalar(key, v)?,
            "analysis.action_samples" => a.monotonicity.samples = scalar(key, v)?,
            "analysis.ascent_steps" => a.monotonicity.ascent_steps = scalar(key, v)?,
            "analysis.eta" => a.monotonicity.eta = scalar(key, v)?,
            "analysis.exact_tolerance" => a.monotonicity.exact_tolerance = scalar(key, v)?,
            "analysis.se_multiplier" => a.monotonicity.se_multiplier = scalar(key, v)?,
            "analysis.checkpoint" => a.checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "analysis.probe_states" => a.probe_states = scalar(key, v)?,
            "analysis.samples_per_state" => a.samples_per_state = scalar(key, v)?,
            "output.svg" => self.svg = scalar(key, v)?,
            "output.dir" => self.output_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            _ => return Err(QflowError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let a = &self.analysis;
        if a.variance.dims.is_empty() || a.variance.dims[0] == 0 || a.variance.dims.windows(2).any(|w| w[1] <= w[0]) {
            return Err(QflowError::config("analysis.dims", "must be positive and strictly increasing"));
        }
        if !(a.variance.sigma >= 0.0 && a.variance.sigma.is_finite()) {
            return Err(QflowError::config("analysis.sigma", "must be non-negative"));
        }
        if !(a.variance.length > 0.0 && a.variance.length.is_finite()) {
            return Err(QflowError::config("analysis.length", "must be positive"));
        }
        let m = &a.monotonicity;
        for (key, n) in [
            ("analysis.variance_samples", a.variance.samples),
            ("analysis.state_dim", m.state_dim),
            ("analysis.action_dim", m.action_dim),
            ("analysis.num_states", m.num_states),
            ("analysis.action_samples", m.samples),
            ("analysis.ascent_steps", m.ascent_steps),
            ("analysis.probe_states", a.probe_states),
        ] {
            if n == 0 {
                return Err(QflowError::config(key, "must be positive"));
            }
        }
        if a.samples_per_state < 2 {
            return Err(QflowError::config("analysis.samples_per_state", "need at least two samples"));
        }
        if m.grid_points < 2 {
            return Err(QflowError::config("analysis.grid_points", "need at least two grid points"));
        }
        if !(m.eta > 0.0 && m.eta.is_finite()) {
            return Err(QflowError::config("analysis.eta", "must be positive"));
        }
        if a.critic_hidden.iter().any(|&h| h == 0) {
            return Err(QflowError::config("analysis.critic_hidden", "widths must be positive"));
        }
        Ok(())
    }

    /// Every key with its effective value; parsing this back yields an equal config.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let t = &self.train;
        put("env.kind", t.env.kind().into());
        match &t.env {
            EnvConfig::Chain(c) => {
                put("env.num_actuators", num(c.num_joints));
                put("env.horizon", num(c.episode_horizon));
                put("env.randomize_goal", num(c.randomize_goal));
                put("env.goal", join(&c.goal));
                put("env.total_length", num(c.total_length));
                put("env.angle_rate", num(c.angle_rate));
            }
            EnvConfig::Redundant(c) => {
                put("env.num_actuators", num(c.num_actuators));
                put("env.horizon", num(c.episode_horizon));
                put("env.randomize_goal", num(c.randomize_goal));
                put("env.goal", join(&c.goal));
                put("env.dof", num(c.dof));
                put("env.mixing_seed", num(c.mixing_seed));
                put("env.action_cost", num(c.action_cost));
                put("env.dt", num(c.dt));
                put("env.damping", num(c.damping));
                put("env.force_gain", c.force_gain.map_or("auto".into(), num));
            }
        }
        put("train.parallel_envs", num(t.parallel_envs));
        put("train.total_env_steps", num(t.total_env_steps));
        put("train.batch_size", num(t.batch_size));
        put("train.buffer_size", num(t.buffer_size));
        put("train.warmup", num(t.warmup));
        put("train.eval_every", num(t.eval_every));
        put("train.eval_episodes", num(t.eval_episodes));
        put("train.exploration", t.exploration.tag().into());
        put("train.seed", num(t.seed));
        put("train.superiority_shared_source", num(t.superiority_shared_source));
        put("train.wall_time", num(t.wall_time));
        put("train.discount", num(t.agent.critic.discount));
        put("train.learning_rate", num(t.agent.critic.learning_rate));
        put("network.critic_hidden", join(&t.agent.critic.hidden));
        put("network.policy_hidden", join(&t.agent.policy.hidden));
        put("network.flow_hidden", join(&t.agent.field.hidden));
        put("network.critic_batch_norm", num(t.agent.critic.batch_norm.is_some()));
        let (lo, hi) = t.agent.policy.log_std_bounds;
        put("network.policy_log_std", join(&[lo, hi]));
        let f = &t.agent.flow;
        put("flow.ascent_steps", num(f.ascent_steps));
        put("flow.eta", num(f.eta));
        put("flow.ode_steps", num(f.ode_steps));
        put("flow.ode_dt", num(f.ode_dt));
        put("flow.preconditioner", "identity".into());
        let a = &self.analysis;
        put("analysis.dims", join(&a.variance.dims));
        put("analysis.sigma", num(a.variance.sigma));
        put("analysis.length", num(a.variance.length));
        put("analysis.variance_samples", num(a.variance.samples));
        put("analysis.perturbation", a.variance.perturbation.tag().into());
        put("analysis.seed", num(a.monotonicity.seed));
        put("analysis.critic", a.critic.tag().into());
        put("analysis.critic_hidden", join(&a.critic_hidden));
        let mo = &a.monotonicity;
        put("analysis.state_dim", num(mo.state_dim));
        put("analysis.action_dim", num(mo.action_dim));
        put("analysis.num_states", num(mo.num_states));
        put("analysis.grid_points", num(mo.grid_points));
        put("analysis.action_samples", num(mo.samples));
        put("analysis.ascent_steps", num(mo.ascent_steps));
        put("analysis.eta", num(mo.eta));
        put("analysis.exact_tolerance", num(mo.exact_tolerance));
        put("analysis.se_multiplier", num(mo.se_multiplier));
        put(
            "analysis.checkpoint",
            a.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        put("analysis.probe_states", num(a.probe_states));
        put("analysis.samples_per_state", num(a.samples_per_state));
        put("output.svg", num(self.svg));
        put(
            "output.dir",
            self.output_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        m
    }

    /// The resolved map in config-file syntax.
    pub fn resolved_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
