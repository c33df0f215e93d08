//! Built-in over-actuated continuous-control environments.

mod chain;
mod redundant;

use std::collections::BTreeMap;

pub use chain::{forward_kinematics, ChainConfig, ChainEnv};
pub use redundant::{RedundantConfig, RedundantEnv};

use crate::error::{QflowError, Result};

pub const DEFAULT_HORIZON: usize = 200;

/// An action vector clamped into `[-1, 1]^|A|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Action(Vec<f64>);

impl Action {
    /// Clamps every component into the box and reports how many were moved.
    pub fn clamped(values: &[f64]) -> (Action, usize) {
        let mut moved = 0;
        let v = values
            .iter()
            .map(|&x| {
                let c = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
                if c != x {
                    moved += 1;
                }
                c
            })
            .collect();
        (Action(v), moved)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_observation: Vec<f64>,
    pub reward: f64,
    /// The episode is over; see `info["time_limit"]` for horizon truncation.
    pub terminal: bool,
    pub info: BTreeMap<String, f64>,
}

impl StepResult {
    /// True when the episode ended only because the horizon was reached.
    pub fn is_time_limit(&self) -> bool {
        self.info.get("time_limit").copied().unwrap_or(0.0) > 0.0
    }
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Deterministic in `(config, seed)`; zeroes the step counter.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Executes an action after clamping it into the action box.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvConfig {
    Chain(ChainConfig),
    Redundant(RedundantConfig),
}

impl EnvConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            EnvConfig::Chain(_) => "chain",
            EnvConfig::Redundant(_) => "redundant",
        }
    }

    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::Chain(c) => Env::Chain(ChainEnv::new(c.clone())?),
            EnvConfig::Redundant(c) => Env::Redundant(RedundantEnv::new(c.clone())?),
        })
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvConfig::Chain(c) => c.num_joints,
            EnvConfig::Redundant(c) => c.num_actuators,
        }
    }
}

/// Enum dispatch over the built-in environments.
#[derive(Debug, Clone)]
pub enum Env {
    Chain(ChainEnv),
    Redundant(RedundantEnv),
}

impl Environment for Env {
    fn observation_dim(&self) -> usize {
        match self {
            Env::Chain(e) => e.observation_dim(),
            Env::Redundant(e) => e.observation_dim(),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            Env::Chain(e) => e.action_dim(),
            Env::Redundant(e) => e.action_dim(),
        }
    }

    fn horizon(&self) -> usize {
        match self {
            Env::Chain(e) => e.horizon(),
            Env::Redundant(e) => e.horizon(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            Env::Chain(e) => e.reset(seed),
            Env::Redundant(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        match self {
            Env::Chain(e) => e.step(action),
            Env::Redundant(e) => e.step(action),
        }
    }
}

pub(crate) fn check_action_len(expected: usize, action: &[f64]) -> Result<()> {
    if action.len() != expected {
        return Err(QflowError::dims("environment action", expected, action.len()));
    }
    Ok(())
}

/// Shared episode bookkeeping: step counter and reset guard.
#[derive(Debug, Clone, Default)]
pub(crate) struct EpisodeClock {
    steps: usize,
    active: bool,
}

impl EpisodeClock {
    pub fn reset(&mut self) {
        self.steps = 0;
        self.active = true;
    }

    /// Advances the clock; returns whether the horizon has been reached.
    pub fn tick(&mut self, horizon: usize) -> Result<bool> {
        if !self.active {
            return Err(QflowError::InvalidArgument(
                "step called before reset or after the episode ended".into(),
            ));
        }
        self.steps += 1;
        let done = self.steps >= horizon;
        if done {
            self.active = false;
        }
        Ok(done)
    }
}
