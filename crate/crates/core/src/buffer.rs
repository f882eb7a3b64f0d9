//! Server-side buffer bank.
//!
//! Worker `s` feeds buffer `s mod B`. Each buffer keeps the running mean of
//! the gradients it received since the last zero-out, updated by the
//! incremental recurrence `h <- ((N - 1) h + g) / N`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Buffer index for a worker.
pub fn assign_buffer(worker_id: usize, buffers: usize) -> usize {
    assert!(buffers >= 1, "buffer count must be positive");
    worker_id % buffers
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferSlot<T> {
    mean: Vec<T>,
    count: u64,
}

impl<T: Scalar> BufferSlot<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            count: 0,
        }
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn accumulate(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                found: g.len(),
            });
        }
        self.count += 1;
        let n = T::of(self.count as f64);
        let prev = n - T::one();
        for (h, &x) in self.mean.iter_mut().zip(g) {
            *h = (prev * *h + x) / n;
        }
        Ok(())
    }

    pub fn zero_out(&mut self) {
        self.mean.iter_mut().for_each(|h| *h = T::zero());
        self.count = 0;
    }
}

/// `B` running-mean buffers of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferBank<T> {
    slots: Vec<BufferSlot<T>>,
    dim: usize,
}

impl<T: Scalar> BufferBank<T> {
    pub fn new(buffers: usize, dim: usize) -> Result<Self> {
        if buffers == 0 {
            return Err(Error::InvalidParameter("buffer count must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        Ok(Self {
            slots: (0..buffers).map(|_| BufferSlot::new(dim)).collect(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> &[BufferSlot<T>] {
        &self.slots
    }

    pub fn slot(&self, b: usize) -> &BufferSlot<T> {
        &self.slots[b]
    }

    pub fn buffer_for(&self, worker_id: usize) -> usize {
        assign_buffer(worker_id, self.slots.len())
    }

    pub fn accumulate(&mut self, b: usize, g: &[T]) -> Result<()> {
        let buffers = self.slots.len();
        self.slots
            .get_mut(b)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("buffer index {b} out of range (B = {buffers})"))
            })?
            .accumulate(g)
    }

    pub fn all_ready(&self) -> bool {
        self.slots.iter().all(|s| s.count > 0)
    }

    /// Indices of buffers that have not received a gradient yet.
    pub fn empty_buffers(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.count == 0)
            .map(|(b, _)| b)
            .collect()
    }

    pub fn zero_out(&mut self) {
        self.slots.iter_mut().for_each(BufferSlot::zero_out);
    }

    /// Current buffer means, one candidate per buffer.
    pub fn candidates(&self) -> Vec<Vec<T>> {
        self.slots.iter().map(|s| s.mean.clone()).collect()
    }
}
