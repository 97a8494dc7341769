//! Transition batches, the ring-buffer store for model rollouts, and the
//! env/model mixed sampler.

use ndarray::Array2;
use rand::Rng;

use crate::dataset::Transition;
use crate::error::{Error, Result};

/// Row-major transition batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Vec<f64>,
    pub s_next: Array2<f64>,
    pub done: Vec<bool>,
    /// Dataset row of each transition, `None` for model-generated rows.
    pub env_index: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_rows(rows: &[(&Transition, Option<usize>)], state_dim: usize, action_dim: usize) -> Self {
        let n = rows.len();
        let mut s = Array2::zeros((n, state_dim));
        let mut a = Array2::zeros((n, action_dim));
        let mut s_next = Array2::zeros((n, state_dim));
        for (k, (t, _)) in rows.iter().enumerate() {
            s.row_mut(k).iter_mut().zip(&t.s).for_each(|(d, v)| *d = *v);
            a.row_mut(k).iter_mut().zip(&t.a).for_each(|(d, v)| *d = *v);
            s_next.row_mut(k).iter_mut().zip(&t.s_next).for_each(|(d, v)| *d = *v);
        }
        Self {
            s,
            a,
            r: rows.iter().map(|(t, _)| t.r).collect(),
            s_next,
            done: rows.iter().map(|(t, _)| t.done).collect(),
            env_index: rows.iter().map(|(_, i)| *i).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Uniform draws with replacement from a transition slice.
    pub fn sample<R: Rng + ?Sized>(transitions: &[Transition], n: usize, state_dim: usize, action_dim: usize, rng: &mut R) -> Self {
        let rows: Vec<(&Transition, Option<usize>)> = (0..n)
            .map(|_| {
                let i = rng.gen_range(0..transitions.len());
                (&transitions[i], Some(i))
            })
            .collect();
        Self::from_rows(&rows, state_dim, action_dim)
    }
}

/// Fixed-capacity store that overwrites its oldest entry once full.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
    pub total_pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer", "capacity must be positive"));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            cursor: 0,
            total_pushed: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.total_pushed += 1;
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, it: I) {
        for t in it {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Stored items from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }
}

/// Each of `batch_size` draws picks the dataset with probability `f` and the
/// model buffer otherwise, then a uniform item. An empty model buffer sends
/// every draw to the dataset.
pub fn mixed_sample<R: Rng + ?Sized>(
    env: &[Transition],
    model: &ReplayBuffer,
    f: f64,
    batch_size: usize,
    state_dim: usize,
    action_dim: usize,
    rng: &mut R,
) -> Result<Batch> {
    if env.is_empty() {
        return Err(Error::Empty("environment dataset"));
    }
    if model.is_empty() && f < 1.0 {
        log::warn!("model buffer is empty; drawing all {batch_size} samples from the dataset");
    }
    let rows: Vec<(&Transition, Option<usize>)> = (0..batch_size)
        .map(|_| {
            let from_env = model.is_empty() || rng.gen::<f64>() < f;
            if from_env {
                let i = rng.gen_range(0..env.len());
                (&env[i], Some(i))
            } else {
                (model.get(rng.gen_range(0..model.len())), None)
            }
        })
        .collect();
    Ok(Batch::from_rows(&rows, state_dim, action_dim))
}
