use std::collections::VecDeque;

/// Bounded FIFO of `(step, item)` pairs; the oldest entry is evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    entries: VecDeque<(usize, T)>,
}

impl<T: Clone> MemoryBank<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory bank capacity must be positive");
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, step: usize, item: T) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((step, item));
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Steps of the stored entries, oldest first.
    pub fn steps(&self) -> Vec<usize> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn items(&self) -> Vec<T> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }
}
