//! Event queue and event log for the discrete-event core.
//!
//! Events are ordered by `(time, seq)`; `seq` is assigned at scheduling time
//! so that simultaneous events run in the order they were scheduled.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::error::SimError;
use crate::model::{NodeId, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum EventKind {
    ApiRequest,
    PullQueued,
    SocketOpened,
    LayerDone,
    UnpackDone,
    ImageDone,
    PullCancelled,
    PodPhase,
    GcScan,
    EvictionScan,
    AttackStep,
    MagiAlert,
    MagiKill,
    WorkloadDone,
    MetricsSample,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A scheduled event carrying an arbitrary payload.
#[derive(Clone, Debug)]
pub struct SimEvent<T> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: T,
}

impl<T> PartialEq for SimEvent<T> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<T> Eq for SimEvent<T> {}

impl<T> PartialOrd for SimEvent<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for SimEvent<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug)]
pub struct EventQueue<T> {
    heap: BinaryHeap<Reverse<SimEvent<T>>>,
    next_seq: u64,
    clock: SimTime,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            clock: SimTime::ZERO,
        }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    /// Moves the clock forward. Never moves it backwards.
    pub fn advance_to(&mut self, t: SimTime) {
        debug_assert!(t >= self.clock);
        self.clock = self.clock.max(t);
    }

    pub fn schedule(&mut self, time: SimTime, payload: T) -> Result<u64, SimError> {
        if time < self.clock {
            return Err(SimError::SchedulingInPast {
                at: time.secs(),
                clock: self.clock.secs(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(SimEvent { time, seq, payload }));
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    /// Pops the earliest event and moves the clock to its time.
    pub fn pop(&mut self) -> Option<SimEvent<T>> {
        let Reverse(ev) = self.heap.pop()?;
        self.clock = self.clock.max(ev.time);
        Some(ev)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// One line of the exported event log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub node: Option<NodeId>,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, time: SimTime, kind: EventKind, node: Option<NodeId>, detail: String) {
        let seq = self.records.len() as u64;
        self.records.push(LogRecord {
            time,
            seq,
            kind,
            node,
            detail,
        });
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Newline-delimited `time seq kind node detail`, tab separated.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 64);
        for r in &self.records {
            let node = r.node.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:.9}\t{}\t{}\t{}\t{}",
                r.time.secs(),
                r.seq,
                r.kind,
                node,
                r.detail
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs(s)
    }

    #[test]
    fn schedule_in_future_is_accepted() {
        let mut q = EventQueue::new();
        q.advance_to(t(3.0));
        assert!(q.schedule(t(5.0), "a").is_ok());
    }

    #[test]
    fn ties_run_in_scheduling_order() {
        let mut q = EventQueue::new();
        q.advance_to(t(3.0));
        q.schedule(t(3.0), "first").unwrap();
        q.schedule(t(3.0), "second").unwrap();
        assert_eq!(q.pop().unwrap().payload, "first");
        assert_eq!(q.pop().unwrap().payload, "second");
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut q: EventQueue<()> = EventQueue::new();
        q.advance_to(t(3.0));
        assert_eq!(
            q.schedule(t(2.0), ()),
            Err(SimError::SchedulingInPast { at: 2.0, clock: 3.0 })
        );
    }

    #[test]
    fn pops_never_go_back_in_time() {
        let mut q = EventQueue::new();
        for (i, s) in [5.0, 1.0, 3.0, 1.0, 9.0, 0.5].iter().enumerate() {
            q.schedule(t(*s), i).unwrap();
        }
        let mut last = SimTime::ZERO;
        let mut order = vec![];
        while let Some(ev) = q.pop() {
            assert!(ev.time >= last);
            last = ev.time;
            order.push(ev.payload);
        }
        assert_eq!(order, vec![5, 1, 3, 2, 0, 4]);
    }

    #[test]
    fn log_text_is_stable() {
        let mut log = EventLog::default();
        log.push(t(1.5), EventKind::GcScan, Some(NodeId(0)), "deleted=2".into());
        assert_eq!(log.to_text(), "1.500000000\t0\tGcScan\tnode-0\tdeleted=2\n");
    }
}
