//! FIFO experience replay with uniform sampling.

use std::collections::VecDeque;

use crate::rng::RngStream;
use crate::{Error, Result};

/// Bounded FIFO buffer. When full, pushing evicts the oldest element.
/// Sampling draws uniformly with replacement from the current contents.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    storage: VecDeque<T>,
    insert_count: u64,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            storage: VecDeque::with_capacity(capacity),
            insert_count: 0,
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

    /// Total number of pushes over the buffer's lifetime.
    pub fn insert_count(&self) -> u64 {
        self.insert_count
    }

    pub fn push(&mut self, item: T) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(item);
        self.insert_count += 1;
    }

    /// Draw exactly `n` items uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<T>> {
        if self.storage.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| self.storage[rng.below(self.storage.len())].clone())
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.storage.iter()
    }
}
