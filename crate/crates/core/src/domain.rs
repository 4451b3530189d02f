//! Stream primitives: interactions, the historical reservoir, the seen-pair
//! index and the simulated stream schedule.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type UserId = u32;
pub type ItemId = u32;

/// One implicit user-item event. Every stored interaction is a positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    /// Seconds since the epoch.
    pub timestamp: i64,
    /// Global arrival ordinal, strictly increasing.
    pub seq: u64,
}

impl Interaction {
    pub fn new(user: UserId, item: ItemId, timestamp: i64, seq: u64) -> Self {
        Interaction {
            user,
            item,
            timestamp,
            seq,
        }
    }
}

/// Bounded FIFO buffer of recent historical interactions, oldest first.
#[derive(Debug, Clone)]
pub struct Reservoir {
    capacity: usize,
    buffer: VecDeque<Interaction>,
}

impl Reservoir {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("reservoir_capacity", "must be positive"));
        }
        Ok(Reservoir {
            capacity,
            buffer: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Appends `x`, evicting the oldest element once over capacity.
    ///
    /// Returns the evicted interaction, if any. Rejects `x` unless its `seq`
    /// is larger than every buffered `seq`.
    pub fn insert(&mut self, x: Interaction) -> Result<Option<Interaction>> {
        if let Some(last) = self.buffer.back() {
            if x.seq <= last.seq {
                return Err(Error::OutOfOrder {
                    last: last.seq,
                    got: x.seq,
                });
            }
        }
        self.buffer.push_back(x);
        if self.buffer.len() > self.capacity {
            Ok(self.buffer.pop_front())
        } else {
            Ok(None)
        }
    }

    pub fn extend<'a>(&mut self, xs: impl IntoIterator<Item = &'a Interaction>) -> Result<()> {
        for x in xs {
            self.insert(*x)?;
        }
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<&Interaction> {
        self.buffer.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interaction> + '_ {
        self.buffer.iter()
    }

    /// Number of buffered interactions with `seq < seq_bound`. Those form a
    /// prefix of the buffer.
    pub fn count_before(&self, seq_bound: u64) -> usize {
        self.buffer.partition_point(|x| x.seq < seq_bound)
    }

    pub fn to_vec(&self) -> Vec<Interaction> {
        self.buffer.iter().copied().collect()
    }
}

/// Exact per-user record of every (user, item) pair fed to the system.
#[derive(Debug, Clone, Default)]
pub struct SeenIndex {
    by_user: Vec<HashSet<ItemId>>,
    total: usize,
}

impl SeenIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_users(num_users: usize) -> Self {
        SeenIndex {
            by_user: vec![HashSet::new(); num_users],
            total: 0,
        }
    }

    /// Returns true if the pair was new.
    pub fn record(&mut self, user: UserId, item: ItemId) -> bool {
        let u = user as usize;
        if u >= self.by_user.len() {
            self.by_user.resize_with(u + 1, HashSet::new);
        }
        let fresh = self.by_user[u].insert(item);
        if fresh {
            self.total += 1;
        }
        fresh
    }

    pub fn record_all<'a>(&mut self, xs: impl IntoIterator<Item = &'a Interaction>) {
        for x in xs {
            self.record(x.user, x.item);
        }
    }

    pub fn contains(&self, user: UserId, item: ItemId) -> bool {
        self.by_user
            .get(user as usize)
            .is_some_and(|items| items.contains(&item))
    }

    pub fn items_of(&self, user: UserId) -> Option<&HashSet<ItemId>> {
        self.by_user.get(user as usize)
    }

    pub fn count_for(&self, user: UserId) -> usize {
        self.items_of(user).map_or(0, HashSet::len)
    }

    /// Distinct pairs recorded.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Simulated processing (`n_p`) and receiving (`n_r`) speeds, in
/// interactions per training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub n_p: usize,
    pub n_r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    Underload,
    Balanced,
    Overload,
}

impl StreamSchedule {
    pub fn new(n_p: usize, n_r: usize) -> Result<Self> {
        if n_p == 0 {
            return Err(Error::invalid("n_p", "must be positive"));
        }
        if n_r == 0 {
            return Err(Error::invalid("n_r", "must be positive"));
        }
        Ok(StreamSchedule { n_p, n_r })
    }

    pub fn workload(&self) -> Workload {
        use std::cmp::Ordering::*;
        match self.n_r.cmp(&self.n_p) {
            Less => Workload::Underload,
            Equal => Workload::Balanced,
            Greater => Workload::Overload,
        }
    }

    /// Splits a stream into the per-iteration arrival batches; the last may
    /// be partial.
    pub fn batches<'a>(&self, stream: &'a [Interaction]) -> std::slice::Chunks<'a, Interaction> {
        stream.chunks(self.n_r)
    }

    pub fn iterations(&self, stream_len: usize) -> usize {
        stream_len.div_ceil(self.n_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ix(seq: u64) -> Interaction {
        Interaction::new(seq as u32 % 7, seq as u32 % 11, seq as i64, seq)
    }

    #[test]
    fn fifo_eviction_when_full() {
        let mut r = Reservoir::new(2).unwrap();
        r.insert(ix(0)).unwrap();
        r.insert(ix(1)).unwrap();
        let evicted = r.insert(ix(2)).unwrap();
        assert_eq!(evicted, Some(ix(0)));
        assert_eq!(r.to_vec(), vec![ix(1), ix(2)]);
    }

    #[test]
    fn insert_into_empty_and_below_capacity() {
        let mut r = Reservoir::new(3).unwrap();
        assert_eq!(r.insert(ix(0)).unwrap(), None);
        assert_eq!(r.to_vec(), vec![ix(0)]);

        let mut r = Reservoir::new(2).unwrap();
        r.insert(ix(0)).unwrap();
        assert_eq!(r.insert(ix(1)).unwrap(), None);
        assert_eq!(r.to_vec(), vec![ix(0), ix(1)]);
    }

    #[test]
    fn rejects_out_of_order_seq() {
        let mut r = Reservoir::new(4).unwrap();
        r.insert(ix(5)).unwrap();
        assert!(matches!(
            r.insert(ix(5)),
            Err(Error::OutOfOrder { last: 5, got: 5 })
        ));
        assert!(r.insert(ix(3)).is_err());
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(Reservoir::new(0).is_err());
    }

    #[test]
    fn count_before_is_prefix_length() {
        let mut r = Reservoir::new(10).unwrap();
        for s in [2, 4, 6, 8] {
            r.insert(ix(s)).unwrap();
        }
        assert_eq!(r.count_before(0), 0);
        assert_eq!(r.count_before(5), 2);
        assert_eq!(r.count_before(100), 4);
    }

    #[test]
    fn seen_index_examples() {
        let mut s = SeenIndex::new();
        assert!(!s.contains(0, 0));
        s.record(3, 7);
        assert!(s.contains(3, 7));
        assert!(!s.contains(3, 8));
        assert!(!s.record(3, 7));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn schedule_workload_and_batches() {
        assert!(StreamSchedule::new(0, 1).is_err());
        assert!(StreamSchedule::new(1, 0).is_err());
        let s = StreamSchedule::new(256, 128).unwrap();
        assert_eq!(s.workload(), Workload::Underload);
        assert_eq!(StreamSchedule::new(256, 512).unwrap().workload(), Workload::Overload);
        let stream: Vec<_> = (0..300).map(ix).collect();
        let sizes: Vec<_> = s.batches(&stream).map(<[_]>::len).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        assert_eq!(s.iterations(300), 3);
    }

    proptest! {
        #[test]
        fn reservoir_matches_last_window(cap in 1usize..64, n in 0usize..10_000, stride in 1u64..4) {
            let mut r = Reservoir::new(cap).unwrap();
            let mut all = Vec::new();
            for i in 0..n as u64 {
                let x = ix(i * stride);
                r.insert(x).unwrap();
                all.push(x);
                prop_assert!(r.len() <= cap);
            }
            let keep = cap.min(all.len());
            prop_assert_eq!(r.to_vec(), all[all.len() - keep..].to_vec());
        }

        #[test]
        fn seen_index_matches_scan(pairs in proptest::collection::vec((0u32..20, 0u32..30), 0..300),
                                   probes in proptest::collection::vec((0u32..25, 0u32..35), 50)) {
            let mut s = SeenIndex::new();
            for &(u, v) in &pairs {
                s.record(u, v);
            }
            for &(u, v) in &probes {
                prop_assert_eq!(s.contains(u, v), pairs.contains(&(u, v)));
            }
        }
    }
}
