//! Bounded experience store: a ring that evicts oldest-first, refuses to
//! sample until a minimum fill, and draws uniform batches without
//! replacement. Insert (manager side) and sample (learner side) are
//! linearizable with respect to each other.

use std::collections::VecDeque;
use std::sync::Mutex;

use rand::Rng;
use thiserror::Error;

use crate::state::Experience;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("replay memory not ready: holds {size}, needs {required}")]
pub struct NotReady {
    pub size: usize,
    pub required: usize,
}

pub struct ReplayMemory {
    inner: Mutex<Ring>,
}

struct Ring {
    buf: VecDeque<Experience>,
    capacity: usize,
    min_fill: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize, min_fill: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            inner: Mutex::new(Ring { buf: VecDeque::new(), capacity, min_fill }),
        }
    }

    pub fn insert(&self, experience: Experience) {
        let mut ring = self.inner.lock().unwrap();
        if ring.buf.len() == ring.capacity {
            ring.buf.pop_front();
        }
        ring.buf.push_back(experience);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_ready(&self) -> bool {
        let ring = self.inner.lock().unwrap();
        ring.buf.len() >= ring.min_fill
    }

    pub fn min_fill(&self) -> usize {
        self.inner.lock().unwrap().min_fill
    }

    /// Copy of the current contents in insertion order.
    pub fn snapshot(&self) -> Vec<Experience> {
        self.inner.lock().unwrap().buf.iter().cloned().collect()
    }

    /// Uniform sample of `batch` distinct experiences. Refuses while the
    /// memory holds fewer than `min_fill` (or `batch`) experiences;
    /// callers retry once more results have arrived.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<Experience>, NotReady> {
        let ring = self.inner.lock().unwrap();
        let required = ring.min_fill.max(batch);
        if ring.buf.len() < required {
            return Err(NotReady { size: ring.buf.len(), required });
        }
        let indices = rand::seq::index::sample(rng, ring.buf.len(), batch);
        Ok(indices.into_iter().map(|i| ring.buf[i].clone()).collect())
    }
}
