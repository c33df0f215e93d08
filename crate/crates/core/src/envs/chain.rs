//! Planar kinematic chain: `|A|` revolute joints with equal links of total length `L`,
//! controlled by bounded joint-angle increments.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_action_len, Action, EpisodeClock, Environment, StepResult, DEFAULT_HORIZON};
use crate::error::{QflowError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub num_joints: usize,
    pub total_length: f64,
    pub goal: [f64; 2],
    pub randomize_goal: bool,
    pub episode_horizon: usize,
    /// Maximum joint-angle change per step, radians.
    pub angle_rate: f64,
}

impl ChainConfig {
    pub fn with_joints(num_joints: usize) -> Self {
        Self {
            num_joints,
            total_length: 1.0,
            goal: [0.3, 0.6],
            randomize_goal: false,
            episode_horizon: DEFAULT_HORIZON,
            angle_rate: 0.1,
        }
    }

    pub fn link_length(&self) -> f64 {
        self.total_length / self.num_joints as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_joints < 1 {
            return Err(QflowError::config("env.num_actuators", "chain needs at least one joint"));
        }
        if !(self.total_length > 0.0 && self.total_length.is_finite()) {
            return Err(QflowError::config("env.total_length", "must be positive"));
        }
        if self.episode_horizon == 0 {
            return Err(QflowError::config("env.horizon", "must be positive"));
        }
        if !(self.angle_rate > 0.0 && self.angle_rate.is_finite()) {
            return Err(QflowError::config("env.angle_rate", "must be positive"));
        }
        if self.goal.iter().any(|g| !g.is_finite()) {
            return Err(QflowError::config("env.goal", "must be finite"));
        }
        Ok(())
    }
}

/// End-effector position `Σᵢ lᵢ (cos Θᵢ, sin Θᵢ)` with `Θᵢ = Σ_{j≤i} φⱼ`.
pub fn forward_kinematics(angles: &[f64], config: &ChainConfig) -> Result<[f64; 2]> {
    check_action_len(config.num_joints, angles)?;
    let l = config.link_length();
    let mut theta = 0.0;
    let mut p = [0.0, 0.0];
    for &phi in angles {
        theta += phi;
        p[0] += l * theta.cos();
        p[1] += l * theta.sin();
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct ChainEnv {
    config: ChainConfig,
    angles: Vec<f64>,
    goal: [f64; 2],
    clock: EpisodeClock,
}

impl ChainEnv {
    pub fn new(config: ChainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            angles: vec![0.0; config.num_joints],
            goal: config.goal,
            config,
            clock: EpisodeClock::default(),
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn end_effector(&self) -> [f64; 2] {
        forward_kinematics(&self.angles, &self.config).expect("angles sized by config")
    }

    pub fn distance_to_goal(&self) -> f64 {
        let p = self.end_effector();
        ((p[0] - self.goal[0]).powi(2) + (p[1] - self.goal[1]).powi(2)).sqrt()
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.observation_dim());
        let mut theta = 0.0;
        for &phi in &self.angles {
            theta += phi;
            obs.push(theta.sin());
            obs.push(theta.cos());
        }
        obs.extend_from_slice(&self.goal);
        obs.extend_from_slice(&self.end_effector());
        obs
    }
}

impl Environment for ChainEnv {
    fn observation_dim(&self) -> usize {
        2 * self.config.num_joints + 4
    }

    fn action_dim(&self) -> usize {
        self.config.num_joints
    }

    fn horizon(&self) -> usize {
        self.config.episode_horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.angles.iter_mut().for_each(|a| *a = 0.0);
        self.goal = if self.config.randomize_goal {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = self.config.total_length;
            let r = rng.random_range(0.2 * l..0.9 * l);
            let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            [r * angle.cos(), r * angle.sin()]
        } else {
            self.config.goal
        };
        self.clock.reset();
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action_len(self.config.num_joints, action)?;
        let (action, _) = Action::clamped(action);
        let done = self.clock.tick(self.config.episode_horizon)?;
        for (phi, a) in self.angles.iter_mut().zip(action.values()) {
            *phi += self.config.angle_rate * a;
        }
        let distance = self.distance_to_goal();
        let mut info = BTreeMap::new();
        info.insert("distance".to_string(), distance);
        info.insert("time_limit".to_string(), if done { 1.0 } else { 0.0 });
        Ok(StepResult {
            next_observation: self.observation(),
            reward: -distance,
            terminal: done,
            info,
        })
    }
}
