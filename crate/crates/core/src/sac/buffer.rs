use std::path::Path;

use rand::Rng as _;

use crate::diffcore::{Reader, Tensor, Writer};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BUFFER_MAGIC: &[u8; 4] = b"WBRB";
pub const BUFFER_VERSION: u32 = 1;

/// A sampled minibatch. `dones` is 1.0 for genuine terminal transitions only;
/// step-limit truncations are stored as 0.0 so their targets bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub dones: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed-capacity ring buffer of transitions. Actions are stored in the
/// policy's `[-1, 1]` units.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<f64>,
    cursor: usize,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 || state_dim == 0 || action_dim == 0 {
            return Err(Error::Config("replay buffer dimensions must be positive".into()));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            states: vec![0.0; capacity * state_dim],
            actions: vec![0.0; capacity * action_dim],
            rewards: vec![0.0; capacity],
            next_states: vec![0.0; capacity * state_dim],
            dones: vec![0.0; capacity],
            cursor: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn push(&mut self, state: &[f64], action: &[f64], reward: f64, next: &[f64], done: bool) {
        let (sd, ad, i) = (self.state_dim, self.action_dim, self.cursor);
        assert!(state.len() == sd && next.len() == sd && action.len() == ad);
        self.states[i * sd..(i + 1) * sd].copy_from_slice(state);
        self.next_states[i * sd..(i + 1) * sd].copy_from_slice(next);
        self.actions[i * ad..(i + 1) * ad].copy_from_slice(action);
        self.rewards[i] = reward;
        self.dones[i] = if done { 1.0 } else { 0.0 };
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Uniform sampling with replacement over the filled region.
    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Contract("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.len)).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let pick = |src: &[f64], w: usize| {
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            Tensor::matrix(idx.len(), w, out)
        };
        Batch {
            states: pick(&self.states, self.state_dim),
            actions: pick(&self.actions, self.action_dim),
            rewards: pick(&self.rewards, 1),
            next_states: pick(&self.next_states, self.state_dim),
            dones: pick(&self.dones, 1),
        }
    }

    /// All stored states, oldest first.
    pub fn states(&self) -> Tensor {
        let order = self.chronological();
        self.gather(&order).states
    }

    fn chronological(&self) -> Vec<usize> {
        if self.len < self.capacity {
            (0..self.len).collect()
        } else {
            (0..self.capacity).map(|k| (self.cursor + k) % self.capacity).collect()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(BUFFER_MAGIC);
        w.u32(BUFFER_VERSION);
        w.u64(self.capacity as u64);
        w.u32(self.state_dim as u32);
        w.u32(self.action_dim as u32);
        let order = self.chronological();
        w.u64(order.len() as u64);
        let b = self.gather(&order);
        w.f64s(b.states.data());
        w.f64s(b.actions.data());
        w.f64s(b.rewards.data());
        w.f64s(b.next_states.data());
        w.f64s(b.dones.data());
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != BUFFER_MAGIC {
            return Err(Error::Format("not a replay buffer file".into()));
        }
        let version = r.u32()?;
        if version != BUFFER_VERSION {
            return Err(Error::Format(format!("unsupported replay buffer version {version}")));
        }
        let capacity = r.u64()? as usize;
        let sd = r.u32()? as usize;
        let ad = r.u32()? as usize;
        let n = r.u64()? as usize;
        if n > capacity {
            return Err(Error::Format("replay buffer holds more than its capacity".into()));
        }
        let states = r.f64s(n * sd)?;
        let actions = r.f64s(n * ad)?;
        let rewards = r.f64s(n)?;
        let next = r.f64s(n * sd)?;
        let dones = r.f64s(n)?;
        r.finish()?;
        let mut buf = Self::new(capacity, sd, ad)?;
        for i in 0..n {
            buf.push(
                &states[i * sd..(i + 1) * sd],
                &actions[i * ad..(i + 1) * ad],
                rewards[i],
                &next[i * sd..(i + 1) * sd],
                dones[i] != 0.0,
            );
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
