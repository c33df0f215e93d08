//! Over-actuated point mass: `|A|` actuators push a `dof`-dimensional body through a
//! fixed mixing matrix with unit-norm columns, so many actions produce the same force.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_action_len, Action, EpisodeClock, Environment, StepResult, DEFAULT_HORIZON};
use crate::array::DenseArray;
use crate::error::{QflowError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RedundantConfig {
    pub num_actuators: usize,
    pub dof: usize,
    /// Seed of the mixing matrix; the matrix is part of the task, not of the episode.
    pub mixing_seed: u64,
    pub action_cost: f64,
    pub goal: Vec<f64>,
    pub randomize_goal: bool,
    pub episode_horizon: usize,
    pub dt: f64,
    /// Per-step velocity retention factor.
    pub damping: f64,
    /// Scales the mixed force before it enters the dynamics; `None` uses `1/|A|`.
    pub force_gain: Option<f64>,
}

impl RedundantConfig {
    pub fn with_actuators(num_actuators: usize) -> Self {
        Self {
            num_actuators,
            dof: 2,
            mixing_seed: 0,
            action_cost: 1e-3,
            goal: vec![0.6, -0.4],
            randomize_goal: false,
            episode_horizon: DEFAULT_HORIZON,
            dt: 0.05,
            damping: 0.9,
            force_gain: None,
        }
    }

    pub fn effective_force_gain(&self) -> f64 {
        self.force_gain.unwrap_or(1.0 / self.num_actuators as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dof < 1 {
            return Err(QflowError::config("env.dof", "must be at least 1"));
        }
        if self.num_actuators < self.dof {
            return Err(QflowError::config(
                "env.num_actuators",
                format!("over-actuation requires num_actuators >= dof ({})", self.dof),
            ));
        }
        if self.goal.len() != self.dof {
            return Err(QflowError::config("env.goal", format!("expected {} coordinates", self.dof)));
        }
        if self.goal.iter().any(|g| !g.is_finite()) {
            return Err(QflowError::config("env.goal", "must be finite"));
        }
        if self.episode_horizon == 0 {
            return Err(QflowError::config("env.horizon", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(QflowError::config("env.dt", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(QflowError::config("env.damping", "must lie in [0, 1]"));
        }
        if !(self.action_cost >= 0.0 && self.action_cost.is_finite()) {
            return Err(QflowError::config("env.action_cost", "must be non-negative"));
        }
        if let Some(g) = self.force_gain {
            if !(g > 0.0 && g.is_finite()) {
                return Err(QflowError::config("env.force_gain", "must be positive"));
            }
        }
        Ok(())
    }

    /// `dof × |A|` matrix of Gaussian directions normalized to unit columns.
    pub fn mixing_matrix(&self) -> DenseArray {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mixing_seed);
        let mut w = DenseArray::zeros(self.dof, self.num_actuators);
        for c in 0..self.num_actuators {
            let mut col: Vec<f64> = (0..self.dof).map(|_| rng.sample(StandardNormal)).collect();
            let mut norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                col = vec![0.0; self.dof];
                col[c % self.dof] = 1.0;
                norm = 1.0;
            }
            for (r, v) in col.iter().enumerate() {
                w.set(r, c, v / norm);
            }
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct RedundantEnv {
    config: RedundantConfig,
    mixing: DenseArray,
    position: Vec<f64>,
    velocity: Vec<f64>,
    goal: Vec<f64>,
    clock: EpisodeClock,
}

impl RedundantEnv {
    pub fn new(config: RedundantConfig) -> Result<Self> {
        config.validate()?;
        let mixing = config.mixing_matrix();
        Self::with_mixing(config, mixing)
    }

    /// Uses an explicit mixing matrix; every column must have unit norm.
    pub fn with_mixing(config: RedundantConfig, mixing: DenseArray) -> Result<Self> {
        config.validate()?;
        mixing.expect_shape("mixing matrix", (config.dof, config.num_actuators))?;
        for c in 0..config.num_actuators {
            let norm = (0..config.dof).map(|r| mixing.get(r, c).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(QflowError::InvalidArgument(format!(
                    "mixing column {c} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            position: vec![0.0; config.dof],
            velocity: vec![0.0; config.dof],
            goal: config.goal.clone(),
            mixing,
            config,
            clock: EpisodeClock::default(),
        })
    }

    pub fn config(&self) -> &RedundantConfig {
        &self.config
    }

    pub fn mixing(&self) -> &DenseArray {
        &self.mixing
    }

    pub fn position(&self) -> &[f64] {
        &self.position
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    /// Mixed actuator force `W · a` (before the force gain).
    pub fn force(&self, action: &[f64]) -> Result<Vec<f64>> {
        check_action_len(self.config.num_actuators, action)?;
        Ok((0..self.config.dof)
            .map(|r| self.mixing.row(r).iter().zip(action).map(|(w, a)| w * a).sum())
            .collect())
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(3 * self.config.dof);
        obs.extend_from_slice(&self.position);
        obs.extend_from_slice(&self.velocity);
        obs.extend_from_slice(&self.goal);
        obs
    }
}

impl Environment for RedundantEnv {
    fn observation_dim(&self) -> usize {
        3 * self.config.dof
    }

    fn action_dim(&self) -> usize {
        self.config.num_actuators
    }

    fn horizon(&self) -> usize {
        self.config.episode_horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.position.iter_mut().for_each(|p| *p = 0.0);
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
        self.goal = if self.config.randomize_goal {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..self.config.dof).map(|_| rng.random_range(-0.8..0.8)).collect()
        } else {
            self.config.goal.clone()
        };
        self.clock.reset();
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action_len(self.config.num_actuators, action)?;
        let (action, _) = Action::clamped(action);
        let done = self.clock.tick(self.config.episode_horizon)?;
        let force = self.force(action.values())?;
        let gain = self.config.effective_force_gain();
        let (dt, damping) = (self.config.dt, self.config.damping);
        for d in 0..self.config.dof {
            self.velocity[d] = damping * self.velocity[d] + dt * gain * force[d];
            self.position[d] += dt * self.velocity[d];
        }
        let dist2: f64 = self.position.iter().zip(&self.goal).map(|(p, g)| (p - g).powi(2)).sum();
        let effort: f64 = action.values().iter().map(|a| a * a).sum();
        let mut info = BTreeMap::new();
        info.insert("distance".to_string(), dist2.sqrt());
        info.insert("effort".to_string(), effort);
        info.insert("time_limit".to_string(), if done { 1.0 } else { 0.0 });
        Ok(StepResult {
            next_observation: self.observation(),
            reward: -dist2 - self.config.action_cost * effort,
            terminal: done,
            info,
        })
    }
}
