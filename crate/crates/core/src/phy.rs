//! Common and slice-specific control and random access channels.
//!
//! Control channels are error-free: every message is decoded by every
//! addressed device. Random access is slotted contention over orthogonal
//! preambles where a preamble picked by exactly one device succeeds.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Cell;
use crate::ids::{FlowId, NodeId, SliceNetId};
use crate::mac::{Level1Schedule, Level2Allocation};
use crate::sim::{SimTime, SUBFRAME_US};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RachConfig {
    pub preamble_pool: u32,
    /// Subframes between opportunities.
    pub opportunity_period: u32,
    pub max_attempts: u32,
    /// Backoff is drawn uniformly from `1..=backoff_window` opportunities.
    pub backoff_window: u32,
}

impl Default for RachConfig {
    fn default() -> Self {
        RachConfig {
            preamble_pool: 16,
            opportunity_period: 10,
            max_attempts: 8,
            backoff_window: 20,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid RACH config: {0}")]
pub struct RachConfigError(pub &'static str);

impl RachConfig {
    pub fn validate(&self) -> Result<(), RachConfigError> {
        if self.preamble_pool == 0 {
            return Err(RachConfigError("preamble_pool must be >= 1"));
        }
        if self.max_attempts == 0 {
            return Err(RachConfigError("max_attempts must be >= 1"));
        }
        if self.opportunity_period == 0 {
            return Err(RachConfigError("opportunity_period must be >= 1"));
        }
        if self.backoff_window == 0 {
            return Err(RachConfigError("backoff_window must be >= 1"));
        }
        Ok(())
    }

    pub fn period_us(&self) -> SimTime {
        SimTime::from(self.opportunity_period) * SUBFRAME_US
    }
}

/// What an access point advertises.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInfo {
    pub active: Vec<SliceNetId>,
    pub common_rach: RachConfig,
    pub slice_rach: BTreeMap<SliceNetId, RachConfig>,
}

/// A slice as seen by the system-information builder.
#[derive(Debug, Clone, Copy)]
pub struct SliceAdvert<'a> {
    pub slice: SliceNetId,
    pub active: bool,
    pub rach: Option<&'a RachConfig>,
}

pub fn broadcast_system_info<'a>(
    common_rach: &RachConfig,
    slices: impl IntoIterator<Item = SliceAdvert<'a>>,
) -> SystemInfo {
    let mut active = Vec::new();
    let mut slice_rach = BTreeMap::new();
    for s in slices.into_iter().filter(|s| s.active) {
        active.push(s.slice);
        if let Some(cfg) = s.rach {
            slice_rach.insert(s.slice, *cfg);
        }
    }
    active.sort();
    active.dedup();
    SystemInfo {
        active,
        common_rach: *common_rach,
        slice_rach,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommonDciEntry {
    pub slice: SliceNetId,
    pub cells: Vec<Cell>,
}

/// Inter-slice allocation addressed by sNetID on the common DL control channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommonDci {
    pub subframe: u64,
    pub entries: Vec<CommonDciEntry>,
}

impl CommonDci {
    /// Entries a device holding `memberships` can decode.
    pub fn decode_for<'a>(&'a self, memberships: &'a BTreeSet<SliceNetId>) -> impl Iterator<Item = &'a CommonDciEntry> + 'a {
        self.entries
            .iter()
            .filter(move |e| memberships.contains(&e.slice))
    }
}

pub fn emit_common_dci(alloc: &Level2Allocation) -> CommonDci {
    // Level2Allocation keeps grants in a BTreeMap, so entries come out by sNetID.
    CommonDci {
        subframe: alloc.subframe,
        entries: alloc
            .grants
            .iter()
            .map(|(slice, cells)| CommonDciEntry {
                slice: *slice,
                cells: cells.clone(),
            })
            .collect(),
    }
}

/// Per-device scheduling within one slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceDci {
    pub slice: SliceNetId,
    pub subframe: u64,
    pub entries: Vec<(FlowId, Vec<Cell>)>,
}

impl SliceDci {
    pub fn from_schedule(schedule: &Level1Schedule) -> Self {
        SliceDci {
            slice: schedule.slice,
            subframe: schedule.subframe,
            entries: schedule
                .assignments
                .iter()
                .map(|(f, cells)| (*f, cells.clone()))
                .collect(),
        }
    }

    /// First referenced cell for which `allowed` is false.
    pub fn first_outside(&self, allowed: impl Fn(&Cell) -> bool) -> Option<Cell> {
        self.entries
            .iter()
            .flat_map(|(_, cells)| cells.iter())
            .find(|c| !allowed(c))
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UlReport {
    pub slice: SliceNetId,
    pub buffer_bytes: u64,
    pub head_delay_us: SimTime,
}

/// One UL control message on the common channel carrying a section per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonUlControl {
    pub device: NodeId,
    pub sections: Vec<UlReport>,
}

impl CommonUlControl {
    pub fn demux(&self) -> BTreeMap<SliceNetId, &UlReport> {
        self.sections.iter().map(|r| (r.slice, r)).collect()
    }
}

/// Returns `None` when nothing is pending.
pub fn aggregate_ul_control(device: NodeId, mut reports: Vec<UlReport>) -> Option<CommonUlControl> {
    if reports.is_empty() {
        return None;
    }
    reports.sort_by_key(|r| r.slice);
    Some(CommonUlControl {
        device,
        sections: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RachOutcome {
    pub device: NodeId,
    /// `None` for the common channel.
    pub slice: Option<SliceNetId>,
    pub attempts_used: u32,
    pub success: bool,
    pub access_delay_us: SimTime,
}

#[derive(Debug, Clone)]
struct Contender {
    device: NodeId,
    arrived: SimTime,
    attempts: u32,
    next_opportunity: u64,
}

/// Contention state for one RACH (common or one slice) at one access point.
#[derive(Debug, Clone)]
pub struct RachProcess {
    pub config: RachConfig,
    pub slice: Option<SliceNetId>,
    waiting: Vec<Contender>,
}

impl RachProcess {
    pub fn new(config: RachConfig, slice: Option<SliceNetId>) -> Self {
        RachProcess {
            config,
            slice,
            waiting: Vec::new(),
        }
    }

    pub fn pending(&self) -> usize {
        self.waiting.len()
    }

    pub fn is_pending(&self, device: NodeId) -> bool {
        self.waiting.iter().any(|c| c.device == device)
    }

    /// Registers a device that first contends at opportunity `first_opportunity`.
    pub fn enqueue(&mut self, device: NodeId, now: SimTime, first_opportunity: u64) {
        self.waiting.push(Contender {
            device,
            arrived: now,
            attempts: 0,
            next_opportunity: first_opportunity,
        });
    }

    pub fn remove(&mut self, device: NodeId) {
        self.waiting.retain(|c| c.device != device);
    }

    /// Runs opportunity number `index` (at time `at`); contenders due now pick
    /// preambles in device-id order from `rng`.
    pub fn run_opportunity<R: Rng + ?Sized>(&mut self, index: u64, at: SimTime, rng: &mut R) -> Vec<RachOutcome> {
        let mut due: Vec<usize> = (0..self.waiting.len())
            .filter(|i| self.waiting[*i].next_opportunity <= index)
            .collect();
        if due.is_empty() {
            return Vec::new();
        }
        due.sort_by_key(|i| (self.waiting[*i].device, self.waiting[*i].arrived));

        let pool = self.config.preamble_pool;
        let picks: Vec<u32> = due.iter().map(|_| rng.gen_range(0..pool)).collect();
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        for p in &picks {
            *counts.entry(*p).or_insert(0) += 1;
        }

        let mut outcomes = Vec::new();
        let mut finished = Vec::new();
        for (i, pick) in due.iter().zip(&picks) {
            let c = &mut self.waiting[*i];
            c.attempts += 1;
            if counts[pick] == 1 {
                outcomes.push(RachOutcome {
                    device: c.device,
                    slice: self.slice,
                    attempts_used: c.attempts,
                    success: true,
                    access_delay_us: at - c.arrived,
                });
                finished.push(*i);
            } else if c.attempts >= self.config.max_attempts {
                outcomes.push(RachOutcome {
                    device: c.device,
                    slice: self.slice,
                    attempts_used: c.attempts,
                    success: false,
                    access_delay_us: at - c.arrived,
                });
                finished.push(*i);
            } else {
                let backoff = rng.gen_range(1..=self.config.backoff_window);
                c.next_opportunity = index + u64::from(backoff);
            }
        }
        finished.sort_unstable();
        for i in finished.into_iter().rev() {
            self.waiting.remove(i);
        }
        outcomes
    }
}

/// Standalone contention: all `contenders` arrive at time 0 and contend from
/// the first opportunity (one period later) until each succeeds or exhausts
/// its attempts. Outcomes are listed per opportunity, then by device id.
pub fn rach_contend<R: Rng + ?Sized>(
    config: &RachConfig,
    slice: Option<SliceNetId>,
    contenders: &[NodeId],
    rng: &mut R,
) -> Vec<RachOutcome> {
    let mut proc = RachProcess::new(*config, slice);
    for d in contenders {
        proc.enqueue(*d, 0, 1);
    }
    let mut out = Vec::with_capacity(contenders.len());
    let mut index = 1u64;
    while proc.pending() > 0 {
        out.extend(proc.run_opportunity(index, index * config.period_us(), rng));
        index += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessRoute {
    SliceRach,
    CommonRach,
}

/// Chooses the channel for an access request towards `requested` at an AP.
pub fn route_access(slice_active: bool, slice_rach_configured: bool) -> AccessRoute {
    if slice_active && slice_rach_configured {
        AccessRoute::SliceRach
    } else {
        AccessRoute::CommonRach
    }
}

/// What follows a successful common-RACH access tagged with an sNetID.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommonAccessResult {
    Attach,
    ActivateSlice,
    Reject,
}

pub fn rach_common_with_activation(decision: &crate::ran::AdmissionDecision) -> CommonAccessResult {
    use crate::ran::Verdict;
    match decision.verdict {
        Verdict::Accept => CommonAccessResult::Attach,
        Verdict::AcceptWithActivation => CommonAccessResult::ActivateSlice,
        Verdict::Decline => CommonAccessResult::Reject,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ran::{AdmissionDecision, Reason, Verdict};
    use crate::sim::{RngStream, StreamKey};

    fn rng() -> RngStream {
        RngStream::new(11, StreamKey::slice("rach", SliceNetId(1)))
    }

    #[test]
    fn system_info_lists_active_slices() {
        let common = RachConfig::default();
        let info = broadcast_system_info(&common, []);
        assert!(info.active.is_empty());
        assert_eq!(info.common_rach, common);

        let cfg = RachConfig::default();
        let info = broadcast_system_info(
            &common,
            [
                SliceAdvert { slice: SliceNetId(7), active: true, rach: Some(&cfg) },
                SliceAdvert { slice: SliceNetId(5), active: false, rach: None },
                SliceAdvert { slice: SliceNetId(3), active: true, rach: None },
            ],
        );
        assert_eq!(info.active, vec![SliceNetId(3), SliceNetId(7)]);
        assert_eq!(info.slice_rach.len(), 1);
    }

    #[test]
    fn common_dci_ordered_and_addressed() {
        let empty = Level2Allocation::empty(4);
        assert!(emit_common_dci(&empty).entries.is_empty());

        let mut alloc = Level2Allocation::empty(4);
        let cell = |b| Cell { segment: crate::grid::SegmentId(0), block: b, phase: 0 };
        alloc.grants.insert(SliceNetId(2), vec![cell(5)]);
        alloc.grants.insert(SliceNetId(1), vec![cell(1)]);
        let dci = emit_common_dci(&alloc);
        let order: Vec<_> = dci.entries.iter().map(|e| e.slice).collect();
        assert_eq!(order, vec![SliceNetId(1), SliceNetId(2)]);

        let both: BTreeSet<_> = [SliceNetId(1), SliceNetId(2)].into();
        assert_eq!(dci.decode_for(&both).count(), 2);
        let other: BTreeSet<_> = [SliceNetId(3)].into();
        assert_eq!(dci.decode_for(&other).count(), 0);
    }

    #[test]
    fn ul_aggregation_roundtrip() {
        assert!(aggregate_ul_control(NodeId(1), vec![]).is_none());
        let one = aggregate_ul_control(
            NodeId(1),
            vec![UlReport { slice: SliceNetId(4), buffer_bytes: 10, head_delay_us: 0 }],
        )
        .unwrap();
        assert_eq!(one.sections.len(), 1);

        let reports: Vec<UlReport> = [3u16, 1, 2]
            .iter()
            .map(|s| UlReport { slice: SliceNetId(*s), buffer_bytes: u64::from(*s) * 100, head_delay_us: 5 })
            .collect();
        let msg = aggregate_ul_control(NodeId(1), reports.clone()).unwrap();
        assert_eq!(msg.sections.len(), 3);
        let demux = msg.demux();
        for r in &reports {
            assert_eq!(demux[&r.slice], r);
        }
    }

    #[test]
    fn single_contender_succeeds_first_try() {
        let cfg = RachConfig { preamble_pool: 1, ..RachConfig::default() };
        let out = rach_contend(&cfg, None, &[NodeId(9)], &mut rng());
        assert_eq!(out.len(), 1);
        assert!(out[0].success);
        assert_eq!(out[0].attempts_used, 1);
        assert_eq!(out[0].access_delay_us, cfg.period_us());
    }

    #[test]
    fn no_contenders_no_outcomes() {
        assert!(rach_contend(&RachConfig::default(), None, &[], &mut rng()).is_empty());
    }

    #[test]
    fn one_preamble_two_devices_always_collide() {
        let cfg = RachConfig { preamble_pool: 1, max_attempts: 3, backoff_window: 1, ..RachConfig::default() };
        let out = rach_contend(&cfg, None, &[NodeId(1), NodeId(2)], &mut rng());
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| !o.success && o.attempts_used == 3));
    }

    #[test]
    fn outcomes_respect_attempt_bound() {
        let cfg = RachConfig::default();
        let devices: Vec<NodeId> = (0..200).map(NodeId).collect();
        let out = rach_contend(&cfg, Some(SliceNetId(1)), &devices, &mut rng());
        assert_eq!(out.len(), 200);
        for o in &out {
            assert!(o.attempts_used <= cfg.max_attempts);
            assert!(o.attempts_used >= 1);
            if !o.success {
                assert_eq!(o.attempts_used, cfg.max_attempts);
            }
        }
    }

    #[test]
    fn access_routing() {
        assert_eq!(route_access(true, true), AccessRoute::SliceRach);
        assert_eq!(route_access(true, false), AccessRoute::CommonRach);
        assert_eq!(route_access(false, true), AccessRoute::CommonRach);

        let d = |verdict| AdmissionDecision {
            device: NodeId(1),
            slice: SliceNetId(1),
            ap: NodeId(0),
            verdict,
            reason: Reason::Ok,
        };
        assert_eq!(rach_common_with_activation(&d(Verdict::AcceptWithActivation)), CommonAccessResult::ActivateSlice);
        assert_eq!(rach_common_with_activation(&d(Verdict::Decline)), CommonAccessResult::Reject);
        assert_eq!(rach_common_with_activation(&d(Verdict::Accept)), CommonAccessResult::Attach);
    }

    #[test]
    fn config_validation() {
        assert!(RachConfig::default().validate().is_ok());
        assert!(RachConfig { preamble_pool: 0, ..RachConfig::default() }.validate().is_err());
        assert!(RachConfig { max_attempts: 0, ..RachConfig::default() }.validate().is_err());
    }
}
