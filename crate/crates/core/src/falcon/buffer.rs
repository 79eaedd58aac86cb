use std::cmp::Reverse;
use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

/// A chunk at noise level `level`, produced by the decision at step `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAction {
    pub origin: usize,
    pub level: usize,
    pub values: Array2<f64>,
}

impl PartialAction {
    pub fn new(origin: usize, level: usize, values: Array2<f64>) -> Result<Self> {
        if origin < 1 {
            return Err(Error::invalid("partial action origin must be >= 1"));
        }
        if level < 1 {
            return Err(Error::level(level, "buffered partial actions need level >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "partial action (origin {origin}, level {level})"
            )));
        }
        Ok(PartialAction {
            origin,
            level,
            values,
        })
    }
}

type Key = (usize, Reverse<usize>, u64);

/// Bounded store of partial actions.
///
/// Iteration follows eviction order: oldest origin first, then highest level,
/// then insertion order.
#[derive(Debug, Clone)]
pub struct LatentBuffer {
    capacity: usize,
    entries: BTreeMap<Key, PartialAction>,
    next_seq: u64,
}

impl LatentBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be positive"));
        }
        Ok(LatentBuffer {
            capacity,
            entries: BTreeMap::new(),
            next_seq: 0,
        })
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

    /// Inserts `p` and returns whatever was evicted to stay within capacity.
    pub fn insert(&mut self, p: PartialAction) -> Option<PartialAction> {
        let key = (p.origin, Reverse(p.level), self.next_seq);
        self.next_seq += 1;
        self.entries.insert(key, p);
        if self.entries.len() > self.capacity {
            self.entries.pop_first().map(|(_, v)| v)
        } else {
            None
        }
    }

    /// The entry the next overflowing insert would evict.
    pub fn next_eviction(&self) -> Option<&PartialAction> {
        self.entries.values().next()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PartialAction> {
        self.entries.values()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pa(origin: usize, level: usize) -> PartialAction {
        PartialAction::new(origin, level, array![[origin as f64, level as f64]]).unwrap()
    }

    #[test]
    fn evicts_oldest_then_noisiest() {
        let mut b = LatentBuffer::new(2).unwrap();
        assert!(b.insert(pa(1, 5)).is_none());
        assert!(b.insert(pa(1, 3)).is_none());
        let out = b.insert(pa(2, 4)).unwrap();
        assert_eq!((out.origin, out.level), (1, 5));
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn ties_break_by_insertion_order() {
        let mut b = LatentBuffer::new(1).unwrap();
        let mut first = pa(1, 2);
        first.values[[0, 0]] = -1.0;
        b.insert(first.clone());
        let out = b.insert(pa(1, 2)).unwrap();
        assert_eq!(out, first);
    }

    #[test]
    fn rejects_invalid() {
        assert!(LatentBuffer::new(0).is_err());
        assert!(PartialAction::new(0, 1, array![[0.0]]).is_err());
        assert!(PartialAction::new(1, 0, array![[0.0]]).is_err());
        assert!(PartialAction::new(1, 1, array![[f64::NAN]]).is_err());
    }
}
