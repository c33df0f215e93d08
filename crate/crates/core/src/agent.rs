//! The three learned components bundled together, with directory checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::critic::{CriticConfig, TwinCritic};
use crate::error::{QflowError, Result};
use crate::flow::{sample_flow_action, FieldConfig, FlowConfig, FlowSample, VelocityField};
use crate::nn::checkpoint::{read_fragment, write_fragment, FragmentManifest};
use crate::nn::DEFAULT_LEARNING_RATE;
use crate::source_policy::{GaussianSourcePolicy, PolicyConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CRITIC_Q1_KEY: &str = "critic.q1";
pub const CRITIC_Q2_KEY: &str = "critic.q2";
pub const SOURCE_KEY: &str = "policy.source";
pub const FLOW_KEY: &str = "policy.flow";

const FORMAT_VERSION: u32 = 1;

/// Behavior policy used to collect experience.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplorationMode {
    /// Source sample transported by the learned flow.
    Flow,
    /// Source sample only; the flow is never trained.
    Gaussian,
}

impl ExplorationMode {
    pub fn tag(self) -> &'static str {
        match self {
            ExplorationMode::Flow => "flow",
            ExplorationMode::Gaussian => "gaussian",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "flow" => Some(ExplorationMode::Flow),
            "gaussian" => Some(ExplorationMode::Gaussian),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentConfig {
    pub critic: CriticConfig,
    pub policy: PolicyConfig,
    pub field: FieldConfig,
    pub flow: FlowConfig,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub critic: TwinCritic,
    pub source: GaussianSourcePolicy,
    pub field: VelocityField,
    pub flow: FlowConfig,
}

/// Metadata stored next to the network fragments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub env_steps: u64,
    /// Resolved run configuration as `key -> value` text.
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentManifest {
    format_version: u32,
    env_steps: u64,
    state_dim: usize,
    action_dim: usize,
    discount: f64,
    log_std_bounds: (f64, f64),
    flow: FlowConfig,
    config: BTreeMap<String, String>,
    fragments: Vec<FragmentManifest>,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: &AgentConfig, rng: &mut R) -> Result<Self> {
        config.flow.validate()?;
        Ok(Self {
            critic: TwinCritic::new(state_dim, action_dim, &config.critic, rng)?,
            source: GaussianSourcePolicy::new(state_dim, action_dim, &config.policy, rng)?,
            field: VelocityField::new(state_dim, action_dim, &config.field, rng)?,
            flow: config.flow,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.source.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.source.action_dim()
    }

    /// Behavior actions. Gaussian mode returns the source draw as is.
    pub fn act<R: Rng + ?Sized>(
        &self,
        states: &DenseArray,
        rng: &mut R,
        deterministic: bool,
        mode: ExplorationMode,
    ) -> Result<FlowSample> {
        match mode {
            ExplorationMode::Flow => sample_flow_action(&self.field, &self.source, states, rng, deterministic, &self.flow),
            ExplorationMode::Gaussian => {
                let a = if deterministic {
                    self.source.mean_action(states)?
                } else {
                    self.source.sample_source(states, rng)?
                };
                Ok(FlowSample {
                    actions: a.clone(),
                    source: a,
                    clamped: 0,
                })
            }
        }
    }

    /// Writes `manifest.json` and one `<key>.bin` per network into `dir`.
    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| QflowError::io(dir, e))?;
        let (q1, q2) = self.critic.heads();
        let fragments = vec![
            write_fragment(dir, CRITIC_Q1_KEY, q1)?,
            write_fragment(dir, CRITIC_Q2_KEY, q2)?,
            write_fragment(dir, SOURCE_KEY, self.source.trunk())?,
            write_fragment(dir, FLOW_KEY, self.field.network())?,
        ];
        let manifest = AgentManifest {
            format_version: FORMAT_VERSION,
            env_steps: meta.env_steps,
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            discount: self.critic.discount(),
            log_std_bounds: self.source.log_std_bounds(),
            flow: self.flow,
            config: meta.config.clone(),
            fragments,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| QflowError::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| QflowError::io(&path, e))?;
        let manifest: AgentManifest = serde_json::from_str(&text).map_err(|e| QflowError::Checkpoint {
            key: "manifest".into(),
            message: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(QflowError::Checkpoint {
                key: "format_version".into(),
                message: format!("unsupported version {}", manifest.format_version),
            });
        }
        manifest.flow.validate().map_err(|e| QflowError::Checkpoint {
            key: "flow".into(),
            message: e.to_string(),
        })?;
        let fragment = |key: &str| -> Result<_> {
            let m = manifest
                .fragments
                .iter()
                .find(|f| f.key == key)
                .ok_or_else(|| QflowError::Checkpoint {
                    key: key.into(),
                    message: "missing from manifest".into(),
                })?;
            read_fragment(dir, m)
        };
        let (sd, ad) = (manifest.state_dim, manifest.action_dim);
        fn wrap(key: &'static str) -> impl Fn(QflowError) -> QflowError {
            move |e| QflowError::Checkpoint {
                key: key.into(),
                message: e.to_string(),
            }
        }
        let critic = TwinCritic::from_heads(
            fragment(CRITIC_Q1_KEY)?,
            fragment(CRITIC_Q2_KEY)?,
            manifest.discount,
            DEFAULT_LEARNING_RATE,
            sd,
            ad,
        )
        .map_err(wrap("critic"))?;
        let source = GaussianSourcePolicy::from_trunk(fragment(SOURCE_KEY)?, ad, manifest.log_std_bounds, DEFAULT_LEARNING_RATE)
            .map_err(wrap(SOURCE_KEY))?;
        if source.state_dim() != sd {
            return Err(wrap(SOURCE_KEY)(QflowError::dims("source input", sd, source.state_dim())));
        }
        let field = VelocityField::from_network(fragment(FLOW_KEY)?, sd, ad, DEFAULT_LEARNING_RATE).map_err(wrap(FLOW_KEY))?;
        Ok((
            Self {
                critic,
                source,
                field,
                flow: manifest.flow,
            },
            CheckpointMeta {
                env_steps: manifest.env_steps,
                config: manifest.config,
            },
        ))
    }
}
