use crate::ids::VirtualTime;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("event at t={at} is in the past (now={now})")]
pub struct PastEvent {
    pub at: VirtualTime,
    pub now: VirtualTime,
}

struct Entry<E> {
    at: VirtualTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Timestamped event queue with a virtual clock. Equal timestamps pop in
/// insertion order.
pub struct EventQueue<E> {
    now: VirtualTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Entry<E>>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: VirtualTime, event: E) -> Result<u64, PastEvent> {
        if at < self.now {
            return Err(PastEvent { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { at, seq, event }));
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<VirtualTime> {
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    /// Pops the next event if it is due at or before `limit`, moving the clock
    /// to its timestamp.
    pub fn pop_due(&mut self, limit: VirtualTime) -> Option<(VirtualTime, E)> {
        if self.peek_time()? > limit {
            return None;
        }
        let Reverse(e) = self.heap.pop()?;
        debug_assert!(e.at >= self.now);
        self.now = e.at;
        Some((e.at, e.event))
    }

    /// Moves the clock forward to `t` (never backwards).
    pub fn advance_to(&mut self, t: VirtualTime) {
        self.now = self.now.max(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn now_events_precede_later_ones() {
        let mut q = EventQueue::new();
        q.schedule(1, "later").unwrap();
        q.schedule(0, "now").unwrap();
        assert_eq!(q.pop_due(10).unwrap().1, "now");
        assert_eq!(q.pop_due(10).unwrap().1, "later");
    }

    #[test]
    fn ties_keep_insertion_order() {
        let mut q = EventQueue::new();
        for i in 0..5 {
            q.schedule(7, i).unwrap();
        }
        let order: Vec<_> = std::iter::from_fn(|| q.pop_due(7).map(|(_, e)| e)).collect();
        assert_eq!(order, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn past_events_rejected() {
        let mut q = EventQueue::new();
        q.schedule(5, ()).unwrap();
        q.pop_due(5).unwrap();
        assert_eq!(q.schedule(4, ()), Err(PastEvent { at: 4, now: 5 }));
        assert!(q.schedule(5, ()).is_ok());
    }

    #[test]
    fn pop_due_respects_limit() {
        let mut q = EventQueue::new();
        q.schedule(30, ()).unwrap();
        assert!(q.pop_due(29).is_none());
        assert_eq!(q.now(), 0);
        assert!(q.pop_due(30).is_some());
        assert_eq!(q.now(), 30);
    }

    proptest! {
        #[test]
        fn pops_are_sorted_by_time_then_insertion(times in proptest::collection::vec(0u64..50, 0..60)) {
            let mut q = EventQueue::new();
            for (i, t) in times.iter().enumerate() {
                q.schedule(*t, i).unwrap();
            }
            let mut last: Option<(u64, usize)> = None;
            while let Some((t, i)) = q.pop_due(u64::MAX) {
                if let Some(prev) = last {
                    prop_assert!(prev < (t, i));
                }
                prop_assert_eq!(times[i], t);
                last = Some((t, i));
            }
        }
    }
}
