//! Two-layer MAC. Level 2 divides radio resources among slices each
//! subframe; Level 1 schedules flows inside one slice's grant.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, ResourceGrid};
use crate::ids::{FlowId, NodeId, SliceNetId};
use crate::sim::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacError {
    #[error("slice {0} demands resources but owns no subset")]
    UnknownSlice(SliceNetId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Qos {
    pub latency_budget_ms: f64,
    pub min_rate_kbps: f64,
    pub priority: u8,
}

impl Default for Qos {
    fn default() -> Self {
        Qos {
            latency_budget_ms: 100.0,
            min_rate_kbps: 0.0,
            priority: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub bytes: u64,
    pub remaining: u64,
    pub arrival: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletedPacket {
    pub flow: FlowId,
    pub packet: u64,
    pub bytes: u64,
    pub arrival: SimTime,
    pub latency_us: SimTime,
}

/// Byte-counted FIFO belonging to exactly one slice.
#[derive(Debug, Clone)]
pub struct TrafficFlow {
    pub id: FlowId,
    pub device: NodeId,
    pub slice: SliceNetId,
    pub qos: Qos,
    /// Exponentially averaged served rate, kbps.
    pub avg_rate_kbps: f64,
    queue: VecDeque<Packet>,
    backlog: u64,
    next_packet: u64,
}

impl TrafficFlow {
    pub fn new(id: FlowId, device: NodeId, slice: SliceNetId, qos: Qos) -> Self {
        TrafficFlow {
            id,
            device,
            slice,
            qos,
            avg_rate_kbps: 0.0,
            queue: VecDeque::new(),
            backlog: 0,
            next_packet: 0,
        }
    }

    /// Enqueues a packet and returns its per-flow id.
    pub fn push(&mut self, bytes: u64, arrival: SimTime) -> u64 {
        let id = self.next_packet;
        self.next_packet += 1;
        self.backlog += bytes;
        self.queue.push_back(Packet {
            id,
            bytes,
            remaining: bytes,
            arrival,
        });
        id
    }

    pub fn backlog(&self) -> u64 {
        self.backlog
    }

    pub fn is_backlogged(&self) -> bool {
        self.backlog > 0
    }

    pub fn queued_packets(&self) -> usize {
        self.queue.len()
    }

    pub fn head_delay(&self, now: SimTime) -> SimTime {
        self.queue.front().map_or(0, |p| now.saturating_sub(p.arrival))
    }

    pub fn clear(&mut self) -> u64 {
        let dropped = self.backlog;
        self.queue.clear();
        self.backlog = 0;
        dropped
    }

    /// Drains up to `bytes` from the head; packets finishing are reported as
    /// completed at `completion`.
    pub fn drain(&mut self, mut bytes: u64, completion: SimTime) -> (u64, Vec<CompletedPacket>) {
        let mut served = 0;
        let mut done = Vec::new();
        while bytes > 0 {
            let Some(head) = self.queue.front_mut() else { break };
            let take = head.remaining.min(bytes);
            head.remaining -= take;
            bytes -= take;
            served += take;
            if head.remaining == 0 {
                let p = self.queue.pop_front().expect("head exists");
                done.push(CompletedPacket {
                    flow: self.id,
                    packet: p.id,
                    bytes: p.bytes,
                    arrival: p.arrival,
                    latency_us: completion.saturating_sub(p.arrival),
                });
            }
        }
        // Zero-byte packets complete as soon as they reach the head.
        while self.queue.front().map_or(false, |p| p.remaining == 0) {
            let p = self.queue.pop_front().expect("head exists");
            done.push(CompletedPacket {
                flow: self.id,
                packet: p.id,
                bytes: 0,
                arrival: p.arrival,
                latency_us: completion.saturating_sub(p.arrival),
            });
        }
        self.backlog -= served;
        (served, done)
    }
}

/// Bytes one cell carries in one subframe, per segment numerology.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCapacity {
    per_segment: Vec<u64>,
}

impl CellCapacity {
    /// `base_bytes` is the 15 kHz reference; other numerologies scale by spacing.
    pub fn for_grid(grid: &ResourceGrid, base_bytes: u64) -> Self {
        CellCapacity {
            per_segment: grid
                .segments()
                .iter()
                .map(|s| (base_bytes as f64 * s.numerology.spacing_ratio()).round() as u64)
                .collect(),
        }
    }

    pub fn uniform(segments: usize, bytes: u64) -> Self {
        CellCapacity {
            per_segment: vec![bytes; segments],
        }
    }

    pub fn bytes(&self, cell: &Cell) -> u64 {
        self.per_segment[cell.segment.0 as usize]
    }

    /// Cells needed from `cells` (in order) to carry `bytes`; the whole slice
    /// length if it cannot.
    pub fn cells_for(&self, bytes: u64, cells: &[Cell]) -> usize {
        let mut acc = 0;
        for (i, c) in cells.iter().enumerate() {
            if acc >= bytes {
                return i;
            }
            acc += self.bytes(c);
        }
        cells.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Level2Allocation {
    pub subframe: u64,
    pub grants: BTreeMap<SliceNetId, Vec<Cell>>,
    /// Demand in cells left unserved this subframe.
    pub unsatisfied: BTreeMap<SliceNetId, u32>,
    /// (demand, grant) in shared-pool cells per participating slice.
    pub pool: BTreeMap<SliceNetId, (u32, u32)>,
}

impl Level2Allocation {
    pub fn empty(subframe: u64) -> Self {
        Level2Allocation {
            subframe,
            ..Default::default()
        }
    }

    pub fn granted(&self, slice: SliceNetId) -> &[Cell] {
        self.grants.get(&slice).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Real-valued weighted max-min (water-filling) of `capacity` among
/// `(demand, weight)` pairs.
pub fn weighted_max_min_real(capacity: f64, demands: &[(f64, f64)]) -> Vec<f64> {
    let mut alloc = vec![0.0; demands.len()];
    let mut open: Vec<usize> = (0..demands.len())
        .filter(|i| demands[*i].0 > 0.0 && demands[*i].1 > 0.0)
        .collect();
    let mut remaining = capacity;
    while !open.is_empty() && remaining > 1e-12 {
        let weight_sum: f64 = open.iter().map(|i| demands[*i].1).sum();
        let level = remaining / weight_sum;
        let saturated: Vec<usize> = open
            .iter()
            .copied()
            .filter(|i| demands[*i].0 <= demands[*i].1 * level)
            .collect();
        if saturated.is_empty() {
            for i in &open {
                alloc[*i] = demands[*i].1 * level;
            }
            break;
        }
        for i in &saturated {
            alloc[*i] = demands[*i].0;
            remaining -= demands[*i].0;
        }
        open.retain(|i| !saturated.contains(i));
    }
    alloc
}

/// Integer weighted max-min: floor of the real solution, leftovers handed out
/// by largest fractional part (lowest index on ties). Every share is within
/// one cell of the real-valued solution.
pub fn weighted_max_min(capacity: u32, demands: &[(u32, f64)]) -> Vec<u32> {
    let real = weighted_max_min_real(
        f64::from(capacity),
        &demands
            .iter()
            .map(|(d, w)| (f64::from(*d), *w))
            .collect::<Vec<_>>(),
    );
    let mut out: Vec<u32> = real
        .iter()
        .zip(demands)
        .map(|(x, (d, _))| ((x + 1e-9).floor() as u32).min(*d))
        .collect();
    let mut left = capacity.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..demands.len()).collect();
    order.sort_by(|a, b| {
        let fa = real[*a] - f64::from(out[*a]);
        let fb = real[*b] - f64::from(out[*b]);
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if out[i] < demands[i].0 && real[i] - f64::from(out[i]) > 1e-9 {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Inter-slice allocation for one subframe.
///
/// Each slice first takes cells from its own subset (lowest index first);
/// slices with a weight then split the shared pool by weighted max-min over
/// their remaining demand.
pub fn l2_allocate(
    subframe: u64,
    demands: &BTreeMap<SliceNetId, u32>,
    weights: &BTreeMap<SliceNetId, f64>,
    grid: &ResourceGrid,
) -> Result<Level2Allocation, MacError> {
    let phase = (subframe % u64::from(grid.period())) as u32;
    let mut alloc = Level2Allocation::empty(subframe);
    let mut residual: BTreeMap<SliceNetId, u32> = BTreeMap::new();

    for (slice, demand) in demands {
        let subset = grid.subset(*slice).ok_or(MacError::UnknownSlice(*slice))?;
        if *demand == 0 {
            continue;
        }
        let own = subset.cells_in_phase(phase);
        let take = (*demand as usize).min(own.len());
        if take > 0 {
            alloc.grants.insert(*slice, own[..take].to_vec());
        }
        let rest = *demand - take as u32;
        if rest > 0 {
            residual.insert(*slice, rest);
        }
    }

    let pool = grid.pool_cells(phase);
    let participants: Vec<(SliceNetId, u32, f64)> = residual
        .iter()
        .filter_map(|(s, d)| weights.get(s).filter(|w| **w > 0.0).map(|w| (*s, *d, *w)))
        .collect();
    if !pool.is_empty() && !participants.is_empty() {
        let shares = weighted_max_min(
            pool.len() as u32,
            &participants.iter().map(|(_, d, w)| (*d, *w)).collect::<Vec<_>>(),
        );
        let mut next = 0usize;
        for ((slice, demand, _), share) in participants.iter().zip(shares) {
            let cells = &pool[next..next + share as usize];
            next += share as usize;
            if share > 0 {
                alloc.grants.entry(*slice).or_default().extend_from_slice(cells);
            }
            alloc.pool.insert(*slice, (*demand, share));
            let left = demand - share;
            if left > 0 {
                residual.insert(*slice, left);
            } else {
                residual.remove(slice);
            }
        }
    }
    alloc.unsatisfied = residual;
    Ok(alloc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    RoundRobin,
    ProportionalFair,
}

/// Per-slice Level-1 scheduler memory.
#[derive(Debug, Clone, Default)]
pub struct L1State {
    last_served: Option<FlowId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level1Schedule {
    pub slice: SliceNetId,
    pub subframe: u64,
    pub assignments: BTreeMap<FlowId, Vec<Cell>>,
    /// Granted cells left unassigned because no flow needed them.
    pub idle: Vec<Cell>,
}

impl Level1Schedule {
    pub fn assigned_cells(&self) -> usize {
        self.assignments.values().map(Vec::len).sum()
    }
}

/// Distributes `grant` among `flows` (sorted by id). Cells are only left idle
/// once every flow's backlog is covered.
pub fn l1_schedule(
    slice: SliceNetId,
    subframe: u64,
    grant: &[Cell],
    flows: &[&TrafficFlow],
    policy: Policy,
    state: &mut L1State,
    capacity: &CellCapacity,
    pf_window: f64,
) -> Level1Schedule {
    let mut need: Vec<u64> = flows.iter().map(|f| f.backlog()).collect();
    let mut given: Vec<u64> = vec![0; flows.len()];
    let mut assignments: BTreeMap<FlowId, Vec<Cell>> = BTreeMap::new();
    let mut idle = Vec::new();
    let beta = 1.0 / pf_window.max(1.0);

    for cell in grant {
        let bytes = capacity.bytes(cell);
        let pick = match policy {
            Policy::RoundRobin => {
                let start = state
                    .last_served
                    .and_then(|last| flows.iter().position(|f| f.id > last))
                    .unwrap_or(0);
                (0..flows.len())
                    .map(|k| (start + k) % flows.len())
                    .find(|i| need[*i] > 0)
            }
            Policy::ProportionalFair => {
                let mut best: Option<(usize, f64)> = None;
                for (i, f) in flows.iter().enumerate() {
                    if need[i] == 0 {
                        continue;
                    }
                    let projected =
                        (1.0 - beta) * f.avg_rate_kbps + beta * (given[i] as f64 * 8.0);
                    let metric = (bytes as f64 * 8.0) / projected.max(1e-9);
                    if best.map_or(true, |(_, m)| metric > m) {
                        best = Some((i, metric));
                    }
                }
                best.map(|(i, _)| i)
            }
        };
        match pick {
            Some(i) => {
                need[i] = need[i].saturating_sub(bytes);
                given[i] += bytes;
                assignments.entry(flows[i].id).or_default().push(*cell);
                state.last_served = Some(flows[i].id);
            }
            None => idle.push(*cell),
        }
    }

    Level1Schedule {
        slice,
        subframe,
        assignments,
        idle,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServeOutcome {
    pub served: BTreeMap<FlowId, u64>,
    pub completed: Vec<CompletedPacket>,
}

impl ServeOutcome {
    pub fn total_bytes(&self) -> u64 {
        self.served.values().sum()
    }
}

/// Drains each assigned flow by the capacity of its cells. `completion` is
/// the end of the subframe.
pub fn serve(
    schedule: &Level1Schedule,
    flows: &mut [&mut TrafficFlow],
    capacity: &CellCapacity,
    completion: SimTime,
) -> ServeOutcome {
    let mut out = ServeOutcome::default();
    for (flow_id, cells) in &schedule.assignments {
        let Ok(idx) = flows.binary_search_by_key(flow_id, |f| f.id) else {
            continue;
        };
        let bytes: u64 = cells.iter().map(|c| capacity.bytes(c)).sum();
        let (served, done) = flows[idx].drain(bytes, completion);
        out.served.insert(*flow_id, served);
        out.completed.extend(done);
    }
    out
}

/// End-of-subframe update of the PF averages (every flow decays).
pub fn update_averages(flows: &mut [&mut TrafficFlow], served: &BTreeMap<FlowId, u64>, pf_window: f64) {
    let beta = 1.0 / pf_window.max(1.0);
    for f in flows.iter_mut() {
        let kbps = served.get(&f.id).copied().unwrap_or(0) as f64 * 8.0;
        f.avg_rate_kbps = (1.0 - beta) * f.avg_rate_kbps + beta * kbps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{partition_grid, CarveRequest, GridSpec, Numerology, SegmentId, SegmentSpec, TimePattern};

    fn flow(id: u32, backlog: u64) -> TrafficFlow {
        let mut f = TrafficFlow::new(FlowId(id), NodeId(id), SliceNetId(1), Qos::default());
        if backlog > 0 {
            f.push(backlog, 0);
        }
        f
    }

    fn cells(n: u32) -> Vec<Cell> {
        (0..n)
            .map(|b| Cell { segment: SegmentId(0), block: b, phase: 0 })
            .collect()
    }

    fn pool_grid(own_blocks: u32, pool_blocks: u32) -> ResourceGrid {
        let mut segments = vec![];
        if own_blocks > 0 {
            segments.push(SegmentSpec {
                name: "own".into(),
                numerology: 0,
                blocks: 0..own_blocks,
                pattern: TimePattern::every(1),
                shared: false,
            });
        }
        segments.push(SegmentSpec {
            name: "pool".into(),
            numerology: 0,
            blocks: own_blocks..own_blocks + pool_blocks,
            pattern: TimePattern::every(1),
            shared: true,
        });
        partition_grid(
            &GridSpec { total_blocks: own_blocks + pool_blocks, period: 1, segments },
            &Numerology::default_catalog(),
        )
        .unwrap()
    }

    #[test]
    fn whole_subset_for_single_demander() {
        let mut g = pool_grid(50, 10);
        g.carve_subset(SliceNetId(1), &[CarveRequest::Blocks { segment: SegmentId(0), count: 50 }])
            .unwrap();
        let demands = BTreeMap::from([(SliceNetId(1), 50)]);
        let a = l2_allocate(0, &demands, &BTreeMap::new(), &g).unwrap();
        assert_eq!(a.granted(SliceNetId(1)).len(), 50);
        assert!(a.unsatisfied.is_empty());
    }

    #[test]
    fn zero_demand_empty_grants() {
        let g = pool_grid(10, 10);
        let a = l2_allocate(0, &BTreeMap::new(), &BTreeMap::new(), &g).unwrap();
        assert!(a.grants.is_empty());
    }

    #[test]
    fn demand_without_subset_is_error() {
        let g = pool_grid(10, 10);
        let demands = BTreeMap::from([(SliceNetId(3), 1)]);
        assert_eq!(
            l2_allocate(0, &demands, &BTreeMap::new(), &g),
            Err(MacError::UnknownSlice(SliceNetId(3)))
        );
    }

    #[test]
    fn unsatisfied_demand_is_reported() {
        let mut g = pool_grid(10, 10);
        g.carve_subset(SliceNetId(1), &[CarveRequest::Blocks { segment: SegmentId(0), count: 4 }])
            .unwrap();
        let demands = BTreeMap::from([(SliceNetId(1), 9)]);
        let a = l2_allocate(0, &demands, &BTreeMap::new(), &g).unwrap();
        assert_eq!(a.granted(SliceNetId(1)).len(), 4);
        assert_eq!(a.unsatisfied[&SliceNetId(1)], 5);
    }

    #[test]
    fn shared_pool_splits_by_weight() {
        let mut g = pool_grid(0, 100);
        g.carve_subset(SliceNetId(1), &[]).unwrap();
        g.carve_subset(SliceNetId(2), &[]).unwrap();
        let demands = BTreeMap::from([(SliceNetId(1), 80), (SliceNetId(2), 80)]);
        for (w1, w2, e1, e2) in [(1.0, 1.0, 50, 50), (3.0, 1.0, 75, 25), (2.0, 3.0, 40, 60)] {
            let weights = BTreeMap::from([(SliceNetId(1), w1), (SliceNetId(2), w2)]);
            let a = l2_allocate(0, &demands, &weights, &g).unwrap();
            assert_eq!(a.granted(SliceNetId(1)).len(), e1);
            assert_eq!(a.granted(SliceNetId(2)).len(), e2);
        }
    }

    #[test]
    fn water_filling_caps_at_demand() {
        let real = weighted_max_min_real(100.0, &[(10.0, 1.0), (80.0, 1.0), (80.0, 2.0)]);
        assert_eq!(real[0], 10.0);
        assert!((real[1] - 30.0).abs() < 1e-9);
        assert!((real[2] - 60.0).abs() < 1e-9);
        assert_eq!(weighted_max_min(100, &[(10, 1.0), (80, 1.0), (80, 2.0)]), vec![10, 30, 60]);
    }

    #[test]
    fn one_flow_takes_whole_grant() {
        let f = flow(1, 10_000);
        let mut st = L1State::default();
        let s = l1_schedule(SliceNetId(1), 0, &cells(10), &[&f], Policy::RoundRobin, &mut st, &CellCapacity::uniform(1, 100), 100.0);
        assert_eq!(s.assignments[&FlowId(1)].len(), 10);
        assert!(s.idle.is_empty());
    }

    #[test]
    fn round_robin_equal_split() {
        let (a, b) = (flow(1, 10_000), flow(2, 10_000));
        let mut st = L1State::default();
        let s = l1_schedule(SliceNetId(1), 0, &cells(10), &[&a, &b], Policy::RoundRobin, &mut st, &CellCapacity::uniform(1, 100), 100.0);
        assert_eq!(s.assignments[&FlowId(1)].len(), 5);
        assert_eq!(s.assignments[&FlowId(2)].len(), 5);
    }

    #[test]
    fn round_robin_skips_satisfied_flows() {
        let (a, b) = (flow(1, 150), flow(2, 10_000));
        let mut st = L1State::default();
        let s = l1_schedule(SliceNetId(1), 0, &cells(10), &[&a, &b], Policy::RoundRobin, &mut st, &CellCapacity::uniform(1, 100), 100.0);
        assert_eq!(s.assignments[&FlowId(1)].len(), 2);
        assert_eq!(s.assignments[&FlowId(2)].len(), 8);
    }

    #[test]
    fn idle_only_when_all_covered() {
        let a = flow(1, 250);
        let mut st = L1State::default();
        let s = l1_schedule(SliceNetId(1), 0, &cells(10), &[&a], Policy::ProportionalFair, &mut st, &CellCapacity::uniform(1, 100), 100.0);
        assert_eq!(s.assignments[&FlowId(1)].len(), 3);
        assert_eq!(s.idle.len(), 7);
    }

    #[test]
    fn serve_arithmetic() {
        let cap = CellCapacity::uniform(1, 100);
        let mut empty = flow(1, 0);
        let sched = Level1Schedule {
            slice: SliceNetId(1),
            subframe: 0,
            assignments: BTreeMap::from([(FlowId(1), cells(10))]),
            idle: vec![],
        };
        let out = serve(&sched, &mut [&mut empty], &cap, 1000);
        assert_eq!(out.total_bytes(), 0);

        let mut full = flow(1, 1000);
        let out = serve(&sched, &mut [&mut full], &cap, 1000);
        assert_eq!(out.total_bytes(), 1000);
        assert_eq!(out.completed.len(), 1);
        assert_eq!(full.backlog(), 0);
    }

    #[test]
    fn partial_drain_tracks_remaining() {
        let mut f = flow(1, 0);
        f.push(500, 0);
        f.push(500, 0);
        let (served, done) = f.drain(700, 1000);
        assert_eq!((served, done.len(), f.backlog()), (700, 1, 300));
    }

    #[test]
    fn pf_averages_decay() {
        let mut a = flow(1, 0);
        a.avg_rate_kbps = 100.0;
        update_averages(&mut [&mut a], &BTreeMap::new(), 100.0);
        assert!((a.avg_rate_kbps - 99.0).abs() < 1e-12);
    }
}
