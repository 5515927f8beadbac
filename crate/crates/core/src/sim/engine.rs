use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::ids::NodeId;

/// Simulation time in integer microseconds.
pub type SimTime = u64;

/// Length of the scheduling subframe; every numerology is aligned to it.
pub const SUBFRAME_US: SimTime = 1_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {time} us but the clock is already at {clock} us")]
    ScheduleInPast { time: SimTime, clock: SimTime },
}

/// Handler failure annotated with the event it was processing.
#[derive(Debug, Error)]
#[error("event seq {seq} at {time} us targeting {target} failed: {source}")]
pub struct EventError<E: std::error::Error + 'static> {
    pub time: SimTime,
    pub seq: u64,
    pub target: NodeId,
    #[source]
    pub source: E,
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.time == other.0.time && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.seq).cmp(&(self.0.time, self.0.seq))
    }
}

/// Single-threaded event loop ordered strictly by `(time, seq)`.
pub struct Engine<P> {
    clock: SimTime,
    next_seq: u64,
    processed: u64,
    queue: BinaryHeap<Queued<P>>,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            clock: 0,
            next_seq: 0,
            processed: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Enqueues `payload` at absolute time `time`; returns the assigned seq.
    pub fn schedule(&mut self, time: SimTime, target: NodeId, payload: P) -> Result<u64, SimError> {
        if time < self.clock {
            return Err(SimError::ScheduleInPast {
                time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event {
            time,
            seq,
            target,
            payload,
        }));
        Ok(seq)
    }

    pub fn schedule_in(&mut self, delay: SimTime, target: NodeId, payload: P) -> u64 {
        // Cannot be in the past.
        self.schedule(self.clock + delay, target, payload)
            .expect("relative schedule is never in the past")
    }

    /// Pops the next event with `time <= t_end` and advances the clock to it.
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<Event<P>> {
        match self.queue.peek() {
            Some(q) if q.0.time <= t_end => {}
            _ => return None,
        }
        let Queued(ev) = self.queue.pop()?;
        self.clock = ev.time;
        self.processed += 1;
        Some(ev)
    }

    /// Moves the clock forward to `t_end` once no due events remain.
    pub fn finish(&mut self, t_end: SimTime) {
        debug_assert!(self.queue.peek().map_or(true, |q| q.0.time > t_end));
        if t_end > self.clock {
            self.clock = t_end;
        }
    }

    /// Processes every event with `time <= t_end`, then parks the clock at `t_end`.
    pub fn run_until<E, F>(&mut self, t_end: SimTime, mut handler: F) -> Result<(), EventError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&mut Engine<P>, Event<P>) -> Result<(), E>,
    {
        while let Some(ev) = self.pop_due(t_end) {
            let (time, seq, target) = (ev.time, ev.seq, ev.target);
            handler(self, ev).map_err(|source| EventError {
                time,
                seq,
                target,
                source,
            })?;
        }
        self.finish(t_end);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Error)]
    #[error("boom")]
    struct Boom;

    #[test]
    fn same_time_fires_in_schedule_order() {
        let mut eng = Engine::new();
        eng.schedule(5, NodeId(0), "A").unwrap();
        eng.schedule(5, NodeId(0), "B").unwrap();
        let mut seen = Vec::new();
        eng.run_until::<Boom, _>(10, |_, ev| {
            seen.push(ev.payload);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec!["A", "B"]);
    }

    #[test]
    fn zero_time_fires_on_next_step() {
        let mut eng = Engine::new();
        eng.schedule(0, NodeId(1), ()).unwrap();
        let ev = eng.pop_due(0).expect("due");
        assert_eq!(ev.time, 0);
    }

    #[test]
    fn scheduling_into_past_is_rejected() {
        let mut eng: Engine<()> = Engine::new();
        eng.schedule(7, NodeId(0), ()).unwrap();
        eng.pop_due(100).unwrap();
        assert_eq!(
            eng.schedule(3, NodeId(0), ()),
            Err(SimError::ScheduleInPast { time: 3, clock: 7 })
        );
    }

    #[test]
    fn empty_queue_parks_clock_at_end() {
        let mut eng: Engine<()> = Engine::new();
        eng.run_until::<Boom, _>(1000, |_, _| Ok(())).unwrap();
        assert_eq!(eng.now(), 1000);
        assert_eq!(eng.processed(), 0);
    }

    #[test]
    fn periodic_source_counts_arrivals() {
        // 1 ms period, first arrival one period in, stop at 10 ms.
        let mut eng = Engine::new();
        eng.schedule(SUBFRAME_US, NodeId(0), ()).unwrap();
        let mut arrivals = 0;
        eng.run_until::<Boom, _>(10 * SUBFRAME_US, |eng, _| {
            arrivals += 1;
            eng.schedule_in(SUBFRAME_US, NodeId(0), ());
            Ok(())
        })
        .unwrap();
        assert_eq!(arrivals, 10);
        assert_eq!(eng.now(), 10_000);
        assert_eq!(eng.pending(), 1);
    }

    #[test]
    fn handler_error_carries_event_context() {
        let mut eng = Engine::new();
        eng.schedule(42, NodeId(3), ()).unwrap();
        let err = eng.run_until(100, |_, _| Err(Boom)).unwrap_err();
        assert_eq!((err.time, err.seq, err.target), (42, 0, NodeId(3)));
    }

    #[test]
    fn events_after_end_are_kept() {
        let mut eng = Engine::new();
        eng.schedule(5, NodeId(0), 1).unwrap();
        eng.schedule(15, NodeId(0), 2).unwrap();
        let mut seen = vec![];
        eng.run_until::<Boom, _>(10, |_, ev| {
            seen.push(ev.payload);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1]);
        assert_eq!(eng.now(), 10);
        assert_eq!(eng.pending(), 1);
    }
}
