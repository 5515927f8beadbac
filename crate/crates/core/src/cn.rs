//! Core-network slices as chains of virtual functions on shared hosts, and
//! the pairing that composes radio, RAN and CN slices end to end.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{FlowId, SliceNetId};
use crate::sim::SimTime;

/// Radio slices are named after the numerology segment they occupy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RadioSliceId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CnSliceId(pub String);

impl fmt::Display for RadioSliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for CnSliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualFunction {
    pub name: String,
    pub processing_rate_per_ms: f64,
    pub per_packet_latency_us: SimTime,
    pub host: String,
}

impl VirtualFunction {
    /// Time the function is busy per packet, rounded up to whole microseconds.
    pub fn service_interval_us(&self) -> SimTime {
        (1000.0 / self.processing_rate_per_ms).ceil() as SimTime
    }
}

/// FIFO queue in front of one virtual function with deterministic service.
#[derive(Debug, Clone, Default)]
pub struct FunctionQueue {
    next_free: SimTime,
    served_total: u64,
    served_by_slice: BTreeMap<CnSliceId, u64>,
}

impl FunctionQueue {
    /// Admits a packet arriving at `arrival`; returns its departure time.
    /// Arrivals must be offered in nondecreasing time order.
    pub fn admit(&mut self, vf: &VirtualFunction, slice: &CnSliceId, arrival: SimTime) -> SimTime {
        let start = arrival.max(self.next_free);
        self.next_free = start + vf.service_interval_us();
        self.served_total += 1;
        *self.served_by_slice.entry(slice.clone()).or_insert(0) += 1;
        start + vf.per_packet_latency_us
    }

    pub fn served_total(&self) -> u64 {
        self.served_total
    }

    pub fn served_by_slice(&self) -> &BTreeMap<CnSliceId, u64> {
        &self.served_by_slice
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnSlice {
    pub id: CnSliceId,
    /// Indices into the function table.
    pub chain: Vec<usize>,
    pub target_service: String,
}

/// Eager traversal of a whole chain; `queues[i]` belongs to `functions[i]`.
pub fn traverse_chain(
    arrival: SimTime,
    slice: &CnSlice,
    functions: &[VirtualFunction],
    queues: &mut [FunctionQueue],
) -> SimTime {
    slice.chain.iter().fold(arrival, |t, idx| {
        queues[*idx].admit(&functions[*idx], &slice.id, t)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairingMap {
    pub radio_to_ran: BTreeMap<RadioSliceId, BTreeSet<SliceNetId>>,
    pub ran_to_cn: BTreeMap<SliceNetId, BTreeSet<CnSliceId>>,
}

impl PairingMap {
    pub fn radio_parent(&self, ran: SliceNetId) -> Option<&RadioSliceId> {
        self.radio_to_ran
            .iter()
            .find(|(_, rans)| rans.contains(&ran))
            .map(|(r, _)| r)
    }

    pub fn is_consistent(&self, radio: &RadioSliceId, ran: SliceNetId, cn: &CnSliceId) -> bool {
        self.radio_to_ran.get(radio).map_or(false, |r| r.contains(&ran))
            && self.ran_to_cn.get(&ran).map_or(false, |c| c.contains(cn))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Registries {
    pub radio: BTreeSet<RadioSliceId>,
    pub ran: BTreeSet<SliceNetId>,
    /// RAN slices that terminate locally and need no CN pairing.
    pub horizontal: BTreeSet<SliceNetId>,
    pub cn: BTreeSet<CnSliceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairingViolation {
    #[error("pairing references unknown radio slice '{0}'")]
    UnknownRadio(RadioSliceId),
    #[error("pairing references unknown RAN slice {0}")]
    UnknownRan(SliceNetId),
    #[error("pairing references unknown CN slice '{0}'")]
    UnknownCn(CnSliceId),
    #[error("RAN slice {ran} has several radio parents: {parents:?}")]
    MultipleRadioParents { ran: SliceNetId, parents: Vec<RadioSliceId> },
    #[error("RAN slice {0} has no radio parent")]
    NoRadioParent(SliceNetId),
    #[error("CN slice '{0}' is not paired with any RAN slice")]
    UnpairedCn(CnSliceId),
    #[error("vertical RAN slice {0} is not paired with any CN slice")]
    UnpairedRan(SliceNetId),
}

/// Lists every violation; an empty list means the map is valid.
pub fn validate_pairing(map: &PairingMap, reg: &Registries) -> Result<(), Vec<PairingViolation>> {
    let mut v = Vec::new();
    let mut parents: BTreeMap<SliceNetId, Vec<RadioSliceId>> = BTreeMap::new();
    for (radio, rans) in &map.radio_to_ran {
        if !reg.radio.contains(radio) {
            v.push(PairingViolation::UnknownRadio(radio.clone()));
        }
        for ran in rans {
            if !reg.ran.contains(ran) {
                v.push(PairingViolation::UnknownRan(*ran));
            }
            parents.entry(*ran).or_default().push(radio.clone());
        }
    }
    for (ran, ps) in &parents {
        if ps.len() > 1 {
            v.push(PairingViolation::MultipleRadioParents {
                ran: *ran,
                parents: ps.clone(),
            });
        }
    }
    for ran in &reg.ran {
        if !parents.contains_key(ran) {
            v.push(PairingViolation::NoRadioParent(*ran));
        }
    }
    let mut paired_cn: BTreeSet<&CnSliceId> = BTreeSet::new();
    for (ran, cns) in &map.ran_to_cn {
        if !reg.ran.contains(ran) {
            v.push(PairingViolation::UnknownRan(*ran));
        }
        for cn in cns {
            if !reg.cn.contains(cn) {
                v.push(PairingViolation::UnknownCn(cn.clone()));
            }
            paired_cn.insert(cn);
        }
    }
    for cn in &reg.cn {
        if !paired_cn.contains(cn) {
            v.push(PairingViolation::UnpairedCn(cn.clone()));
        }
    }
    for ran in reg.ran.difference(&reg.horizontal) {
        if map.ran_to_cn.get(ran).map_or(true, BTreeSet::is_empty) {
            v.push(PairingViolation::UnpairedRan(*ran));
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct E2EFlowPath {
    pub flow: FlowId,
    pub radio: RadioSliceId,
    pub ran: SliceNetId,
    pub cn: CnSliceId,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CnError {
    #[error("flow {flow} on slice {ran}: no paired CN slice serves '{service}'")]
    NoPath {
        flow: FlowId,
        ran: SliceNetId,
        service: String,
    },
}

/// Picks the CN slice whose service tag matches the flow's (lowest id on ties).
pub fn resolve_path(
    flow: FlowId,
    ran: SliceNetId,
    service: &str,
    direction: Direction,
    map: &PairingMap,
    cn_slices: &BTreeMap<CnSliceId, CnSlice>,
) -> Result<E2EFlowPath, CnError> {
    let no_path = || CnError::NoPath {
        flow,
        ran,
        service: service.to_string(),
    };
    let radio = map.radio_parent(ran).ok_or_else(no_path)?;
    let cn = map
        .ran_to_cn
        .get(&ran)
        .into_iter()
        .flatten()
        .find(|id| cn_slices.get(*id).map_or(false, |s| s.target_service == service))
        .ok_or_else(no_path)?;
    Ok(E2EFlowPath {
        flow,
        radio: radio.clone(),
        ran,
        cn: cn.clone(),
        direction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    Vertical,
    Horizontal,
}

/// Horizontal-slice traffic terminates locally and never enters the core.
pub fn horizontal_termination(kind: SliceKind) -> bool {
    kind == SliceKind::Horizontal
}

/// One packet's entry into the core network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathRecord {
    pub time: SimTime,
    pub flow: FlowId,
    pub radio: RadioSliceId,
    pub ran: SliceNetId,
    pub cn: CnSliceId,
    pub horizontal: bool,
}

/// Records whose triple is not allowed by `map`, or which came from a
/// horizontal slice.
pub fn audit_paths<'a>(records: &'a [PathRecord], map: &PairingMap) -> Vec<&'a PathRecord> {
    records
        .iter()
        .filter(|r| r.horizontal || !map.is_consistent(&r.radio, r.ran, &r.cn))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radio(s: &str) -> RadioSliceId {
        RadioSliceId(s.into())
    }

    fn cn(s: &str) -> CnSliceId {
        CnSliceId(s.into())
    }

    fn vf(latency: SimTime, rate: f64) -> VirtualFunction {
        VirtualFunction {
            name: "f".into(),
            processing_rate_per_ms: rate,
            per_packet_latency_us: latency,
            host: "dc".into(),
        }
    }

    fn registries(rans: &[u16], cns: &[&str]) -> Registries {
        Registries {
            radio: [radio("r1")].into(),
            ran: rans.iter().map(|r| SliceNetId(*r)).collect(),
            horizontal: BTreeSet::new(),
            cn: cns.iter().map(|c| cn(c)).collect(),
        }
    }

    #[test]
    fn one_to_one_pairing_is_valid() {
        let map = PairingMap {
            radio_to_ran: [(radio("r1"), [SliceNetId(1)].into())].into(),
            ran_to_cn: [(SliceNetId(1), [cn("mbb")].into())].into(),
        };
        assert_eq!(validate_pairing(&map, &registries(&[1], &["mbb"])), Ok(()));
    }

    #[test]
    fn one_to_many_in_both_layers() {
        let map = PairingMap {
            radio_to_ran: [(radio("r1"), [SliceNetId(1), SliceNetId(2), SliceNetId(3)].into())].into(),
            ran_to_cn: [
                (SliceNetId(1), [cn("mbb"), cn("health")].into()),
                (SliceNetId(2), [cn("iot")].into()),
                (SliceNetId(3), [cn("mbb")].into()),
            ]
            .into(),
        };
        assert_eq!(validate_pairing(&map, &registries(&[1, 2, 3], &["mbb", "health", "iot"])), Ok(()));
    }

    #[test]
    fn unpaired_and_dangling_are_reported() {
        let map = PairingMap {
            radio_to_ran: [(radio("r1"), [SliceNetId(1)].into()), (radio("r2"), [SliceNetId(1)].into())].into(),
            ran_to_cn: [(SliceNetId(1), [cn("mbb"), cn("ghost")].into())].into(),
        };
        let errs = validate_pairing(&map, &registries(&[1], &["mbb", "orphan"])).unwrap_err();
        assert!(errs.contains(&PairingViolation::UnpairedCn(cn("orphan"))));
        assert!(errs.contains(&PairingViolation::UnknownCn(cn("ghost"))));
        assert!(errs.contains(&PairingViolation::UnknownRadio(radio("r2"))));
        assert!(errs.iter().any(|e| matches!(e, PairingViolation::MultipleRadioParents { .. })));
    }

    fn slices() -> (PairingMap, BTreeMap<CnSliceId, CnSlice>) {
        let map = PairingMap {
            radio_to_ran: [(radio("r1"), [SliceNetId(1)].into())].into(),
            ran_to_cn: [(SliceNetId(1), [cn("health"), cn("mbb")].into())].into(),
        };
        let table = [("mbb", "mbb"), ("health", "health")]
            .into_iter()
            .map(|(id, svc)| {
                (cn(id), CnSlice { id: cn(id), chain: vec![0], target_service: svc.into() })
            })
            .collect();
        (map, table)
    }

    #[test]
    fn path_resolution_by_service_tag() {
        let (map, table) = slices();
        let p = resolve_path(FlowId(1), SliceNetId(1), "mbb", Direction::Uplink, &map, &table).unwrap();
        assert_eq!((p.radio, p.cn), (radio("r1"), cn("mbb")));
        let p = resolve_path(FlowId(1), SliceNetId(1), "health", Direction::Uplink, &map, &table).unwrap();
        assert_eq!(p.cn, cn("health"));
        let e = resolve_path(FlowId(1), SliceNetId(1), "iot", Direction::Uplink, &map, &table);
        assert!(matches!(e, Err(CnError::NoPath { .. })));
    }

    #[test]
    fn empty_chain_single_function() {
        let f = [vf(100, 10.0)];
        let mut q = vec![FunctionQueue::default()];
        let s = CnSlice { id: cn("a"), chain: vec![0], target_service: "x".into() };
        assert_eq!(traverse_chain(5_000, &s, &f, &mut q), 5_100);
    }

    #[test]
    fn serial_service_spacing() {
        let f = [vf(0, 1.0)];
        let mut q = vec![FunctionQueue::default()];
        let s = CnSlice { id: cn("a"), chain: vec![0], target_service: "x".into() };
        let a = traverse_chain(0, &s, &f, &mut q);
        let b = traverse_chain(0, &s, &f, &mut q);
        assert_eq!(b - a, 1_000);
    }

    #[test]
    fn chain_latencies_add() {
        let f = [vf(100, 100.0), vf(200, 100.0), vf(300, 100.0)];
        let mut q = vec![FunctionQueue::default(); 3];
        let s = CnSlice { id: cn("a"), chain: vec![0, 1, 2], target_service: "x".into() };
        assert_eq!(traverse_chain(0, &s, &f, &mut q), 600);
    }

    #[test]
    fn shared_function_accounting() {
        let f = [vf(10, 100.0)];
        let mut q = vec![FunctionQueue::default()];
        let a = CnSlice { id: cn("a"), chain: vec![0], target_service: "x".into() };
        let b = CnSlice { id: cn("b"), chain: vec![0], target_service: "y".into() };
        for t in 0..5 {
            traverse_chain(t * 10, &a, &f, &mut q);
        }
        for t in 0..3 {
            traverse_chain(100 + t, &b, &f, &mut q);
        }
        let per: u64 = q[0].served_by_slice().values().sum();
        assert_eq!(per, q[0].served_total());
        assert_eq!(q[0].served_total(), 8);
    }

    #[test]
    fn horizontal_flows_stay_local() {
        assert!(horizontal_termination(SliceKind::Horizontal));
        assert!(!horizontal_termination(SliceKind::Vertical));
    }

    #[test]
    fn audit_flags_bad_triples() {
        let (map, _) = slices();
        let ok = PathRecord { time: 0, flow: FlowId(1), radio: radio("r1"), ran: SliceNetId(1), cn: cn("mbb"), horizontal: false };
        let bad = PathRecord { cn: cn("iot"), ..ok.clone() };
        let local = PathRecord { horizontal: true, ..ok.clone() };
        let recs = [ok, bad.clone(), local.clone()];
        assert_eq!(audit_paths(&recs, &map), vec![&bad, &local]);
    }
}
