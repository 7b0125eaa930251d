//! Ordered-map baseline behind the same operations as the learned index.

use std::collections::BTreeMap;
use std::ops::Bound;

use memoindex::index::{MemoryUsage, ScanEntry};
use parking_lot::RwLock;

#[derive(Default)]
pub struct OrderedMapBaseline {
    map: RwLock<BTreeMap<Box<[u8]>, u64>>,
}

impl OrderedMapBaseline {
    pub fn bulk_load<K: AsRef<[u8]>>(pairs: &[(K, u64)]) -> Self {
        let map = pairs.iter().map(|(k, v)| (Box::from(k.as_ref()), *v)).collect();
        Self { map: RwLock::new(map) }
    }

    pub fn lookup(&self, key: &[u8]) -> Option<u64> {
        self.map.read().get(key).copied()
    }

    /// True if the key was new.
    pub fn insert(&self, key: &[u8], value: u64) -> bool {
        self.map.write().insert(key.into(), value).is_none()
    }

    pub fn delete(&self, key: &[u8]) -> bool {
        self.map.write().remove(key).is_some()
    }

    pub fn range_scan(&self, start: &[u8], limit: usize) -> Vec<ScanEntry> {
        self.map
            .read()
            .range::<[u8], _>((Bound::Included(start), Bound::Unbounded))
            .take(limit)
            .map(|(k, v)| ScanEntry { key: k.to_vec(), value: *v })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.map.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Analytic size of the tree itself: key handles, child pointers and node
    /// headers, assuming nodes are two-thirds full. Key bytes and values are
    /// payload and not counted.
    pub fn memory(&self) -> MemoryUsage {
        const CAPACITY: usize = 11;
        let n = self.len();
        let per_node = CAPACITY as f64 * 2.0 / 3.0;
        let nodes = (n as f64 / per_node).ceil() as usize;
        let handle = std::mem::size_of::<Box<[u8]>>();
        let header = 2 * std::mem::size_of::<usize>();
        let internal = nodes / CAPACITY;
        let structure = n * handle + nodes * header + internal * (CAPACITY + 1) * std::mem::size_of::<usize>();
        MemoryUsage { structure, ..MemoryUsage::default() }
    }
}
