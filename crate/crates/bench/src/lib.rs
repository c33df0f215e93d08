//! Shared fixtures for the benchmarks.

use qflow_core::agent::{Agent, AgentConfig};
use qflow_core::critic::CriticConfig;
use qflow_core::flow::FieldConfig;
use qflow_core::replay::{Batch, Behavior, ReplayBuffer, Transition};
use qflow_core::source_policy::PolicyConfig;
use qflow_core::DenseArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 32;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseArray::new(rows, cols, data).expect("finite draws")
}

/// Agent with every network at `width × depth` hidden units.
pub fn agent(width: usize, depth: usize) -> Agent {
    let hidden = vec![width; depth];
    let cfg = AgentConfig {
        critic: CriticConfig {
            hidden: hidden.clone(),
            ..CriticConfig::default()
        },
        policy: PolicyConfig {
            hidden: hidden.clone(),
            ..PolicyConfig::default()
        },
        field: FieldConfig {
            hidden,
            ..FieldConfig::default()
        },
        ..AgentConfig::default()
    };
    Agent::new(STATE_DIM, ACTION_DIM, &cfg, &mut rng(0)).expect("valid fixture config")
}

/// Buffer holding `len` random transitions.
pub fn filled_buffer(len: usize) -> ReplayBuffer {
    let mut r = rng(1);
    let mut buf = ReplayBuffer::new(len, STATE_DIM, ACTION_DIM, 1).expect("valid buffer");
    for _ in 0..len {
        let row = |n: usize, r: &mut ChaCha8Rng| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        buf.push(Transition {
            state: row(STATE_DIM, &mut r),
            action: row(ACTION_DIM, &mut r),
            reward: r.random_range(-1.0..0.0),
            next_state: row(STATE_DIM, &mut r),
            terminal: false,
            behavior: Behavior::Flow,
        })
        .expect("matching dims");
    }
    buf
}

pub fn batch(buf: &ReplayBuffer, size: usize) -> Batch {
    buf.sample(size, &mut rng(2)).expect("warm buffer")
}
