//! Fixed-capacity ring buffer of transitions with uniform sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{QflowError, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;
pub const DEFAULT_WARMUP: usize = 5_000;

/// Which behavior policy produced a stored action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Flow,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub behavior: Behavior,
}

/// A sampled minibatch laid out as arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: DenseArray,
    pub actions: DenseArray,
    pub rewards: Vec<f64>,
    pub next_states: DenseArray,
    /// 1.0 for terminal transitions, 0.0 otherwise.
    pub terminals: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    warmup: usize,
    storage: Vec<Transition>,
    write_cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize, warmup: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(QflowError::config("train.buffer_size", "must be positive"));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            warmup,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            write_cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn is_warm(&self, batch_size: usize) -> bool {
        self.len() >= batch_size.max(self.warmup)
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.storage.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn push(&mut self, transition: Transition) -> Result<()> {
        if transition.state.len() != self.state_dim {
            return Err(QflowError::dims("transition state", self.state_dim, transition.state.len()));
        }
        if transition.next_state.len() != self.state_dim {
            return Err(QflowError::dims("transition next_state", self.state_dim, transition.next_state.len()));
        }
        if transition.action.len() != self.action_dim {
            return Err(QflowError::dims("transition action", self.action_dim, transition.action.len()));
        }
        if self.storage.len() < self.capacity {
            self.storage.push(transition);
        } else {
            self.storage[self.write_cursor] = transition;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
        Ok(())
    }

    /// Uniform indices with replacement; fails until the warmup minimum is stored.
    /// Batches larger than the buffer are allowed since draws are with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        let required = self.warmup.max(1);
        if self.len() < required {
            return Err(QflowError::WarmupNotMet {
                size: self.len(),
                required,
            });
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(batch_size, rng)?;
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut states = Vec::with_capacity(batch_size * sd);
        let mut actions = Vec::with_capacity(batch_size * ad);
        let mut next_states = Vec::with_capacity(batch_size * sd);
        let mut rewards = Vec::with_capacity(batch_size);
        let mut terminals = Vec::with_capacity(batch_size);
        for &i in &idx {
            let t = &self.storage[i];
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            next_states.extend_from_slice(&t.next_state);
            rewards.push(t.reward);
            terminals.push(if t.terminal { 1.0 } else { 0.0 });
        }
        Ok(Batch {
            states: DenseArray::new(batch_size, sd, states)?,
            actions: DenseArray::new(batch_size, ad, actions)?,
            rewards,
            next_states: DenseArray::new(batch_size, sd, next_states)?,
            terminals,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn item(k: usize) -> Transition {
        Transition {
            state: vec![k as f64, 0.5],
            action: vec![-(k as f64) / 1e6],
            reward: k as f64 * 0.1,
            next_state: vec![k as f64 + 1.0, 0.5],
            terminal: k % 7 == 0,
            behavior: Behavior::Flow,
        }
    }

    #[test]
    fn push_into_empty_buffer() {
        let mut b = ReplayBuffer::new(10, 2, 1, 0).unwrap();
        b.push(item(1)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.write_cursor(), 1);
    }

    #[test]
    fn overwrites_oldest_at_capacity() {
        let mut b = ReplayBuffer::new(3, 2, 1, 0).unwrap();
        for k in 0..4 {
            b.push(item(k)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|t| t != &item(0)));
        assert_eq!(b.write_cursor(), 1);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut b = ReplayBuffer::new(3, 2, 1, 0).unwrap();
        let mut t = item(0);
        t.action.push(0.0);
        assert!(matches!(b.push(t), Err(QflowError::DimensionMismatch { .. })));
        assert!(b.is_empty());
    }

    #[test]
    fn single_element_repeats() {
        let mut b = ReplayBuffer::new(5, 2, 1, 0).unwrap();
        b.push(item(3)).unwrap();
        let batch = b.sample(4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.rewards, vec![0.30000000000000004; 4]);
        for r in batch.states.iter_rows() {
            assert_eq!(r, &[3.0, 0.5]);
        }
    }

    #[test]
    fn warmup_gate() {
        let mut b = ReplayBuffer::new(100, 2, 1, 10).unwrap();
        for k in 0..9 {
            b.push(item(k)).unwrap();
        }
        let err = b.sample(2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("warmup not met"));
        b.push(item(9)).unwrap();
        assert!(b.sample(2, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn same_seed_same_batch() {
        let mut b = ReplayBuffer::new(50, 2, 1, 0).unwrap();
        for k in 0..50 {
            b.push(item(k)).unwrap();
        }
        let x = b.sample(16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let y = b.sample(16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn sampled_items_are_pushed_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = ReplayBuffer::new(60_000, 2, 1, 0).unwrap();
        let n = 100_000;
        for k in 0..n {
            b.push(item(k)).unwrap();
        }
        let batch = b.sample(n, &mut rng).unwrap();
        for i in 0..n {
            let k = batch.states.get(i, 0) as usize;
            // only the most recent `capacity` items may survive
            assert!(k >= n - 60_000, "stale record {k}");
            let want = item(k);
            assert_eq!(batch.states.row(i), want.state.as_slice());
            assert_eq!(batch.actions.row(i), want.action.as_slice());
            assert_eq!(batch.next_states.row(i), want.next_state.as_slice());
            assert_eq!(batch.rewards[i], want.reward);
            assert_eq!(batch.terminals[i], if want.terminal { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn chi_square_uniformity() {
        let mut b = ReplayBuffer::new(100, 2, 1, 0).unwrap();
        for k in 0..100 {
            b.push(item(k)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut counts = [0usize; 100];
        for i in b.sample_indices(draws, &mut rng).unwrap() {
            counts[i] += 1;
        }
        let expected = draws as f64 / 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let dof = 99.0;
        assert!((chi2 - dof).abs() <= 5.0 * (2.0 * dof).sqrt(), "chi2 {chi2}");
        let p = 0.01;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - expected).abs() <= 5.0 * sigma));
    }
}
