//! Slice-specific RAN behaviour at each access point: lifecycle state
//! machine, on-triggers, admission, association, load balancing and the
//! control/user-plane options.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CarveRequest, GridError, ResourceGrid};
use crate::ids::{NodeId, SliceNetId};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LifecycleState {
    Inactive,
    Activating,
    Active,
    Deactivating,
}

impl LifecycleState {
    pub fn code(self) -> f64 {
        match self {
            LifecycleState::Inactive => 0.0,
            LifecycleState::Activating => 1.0,
            LifecycleState::Active => 2.0,
            LifecycleState::Deactivating => 3.0,
        }
    }

    fn next(self) -> LifecycleState {
        match self {
            LifecycleState::Inactive => LifecycleState::Activating,
            LifecycleState::Activating => LifecycleState::Active,
            LifecycleState::Active => LifecycleState::Deactivating,
            LifecycleState::Deactivating => LifecycleState::Inactive,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RanError {
    #[error("slice {slice} at {ap}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition {
        slice: SliceNetId,
        ap: NodeId,
        from: LifecycleState,
        to: LifecycleState,
    },
    #[error("slice {slice} at {ap} cannot be activated: {source}")]
    Capacity {
        slice: SliceNetId,
        ap: NodeId,
        #[source]
        source: GridError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceLifecycle {
    pub slice: SliceNetId,
    pub ap: NodeId,
    pub state: LifecycleState,
    pub activation_latency_us: SimTime,
    pub since: SimTime,
}

impl SliceLifecycle {
    pub fn new(slice: SliceNetId, ap: NodeId, activation_latency_us: SimTime) -> Self {
        SliceLifecycle {
            slice,
            ap,
            state: LifecycleState::Inactive,
            activation_latency_us,
            since: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.state == LifecycleState::Active
    }

    /// Only the cyclic order Inactive→Activating→Active→Deactivating→Inactive is legal.
    pub fn transition(&mut self, to: LifecycleState, now: SimTime) -> Result<(), RanError> {
        if self.state.next() != to {
            return Err(RanError::IllegalTransition {
                slice: self.slice,
                ap: self.ap,
                from: self.state,
                to,
            });
        }
        self.state = to;
        self.since = now;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    LoadThreshold,
    ActiveDeviceThreshold,
    ServiceContinuity,
    QosRequirement,
}

impl Trigger {
    pub const ALL: [Trigger; 4] = [
        Trigger::LoadThreshold,
        Trigger::ActiveDeviceThreshold,
        Trigger::ServiceContinuity,
        Trigger::QosRequirement,
    ];

    fn bit(self) -> u8 {
        match self {
            Trigger::LoadThreshold => 1,
            Trigger::ActiveDeviceThreshold => 2,
            Trigger::ServiceContinuity => 4,
            Trigger::QosRequirement => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TriggerSet(u8);

impl TriggerSet {
    pub fn insert(&mut self, t: Trigger) {
        self.0 |= t.bit();
    }

    pub fn contains(&self, t: Trigger) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn bits(&self) -> u8 {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = Trigger> + '_ {
        Trigger::ALL.into_iter().filter(|t| self.contains(*t))
    }
}

impl FromIterator<Trigger> for TriggerSet {
    fn from_iter<I: IntoIterator<Item = Trigger>>(iter: I) -> Self {
        let mut s = TriggerSet::default();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

/// What the network knows about demand for a slice at one AP.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observations {
    /// Offered traffic as a fraction of the slice's nominal capacity at the AP.
    pub offered_load: f64,
    pub active_devices: u32,
    pub incoming_handovers: u32,
    /// Worst head-of-line delay over latency budget among waiting flows.
    pub worst_delay_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RanThresholds {
    pub load: f64,
    pub active_devices: u32,
    /// QoS trigger fires once queueing delay exceeds this fraction of budget.
    pub qos_delay_fraction: f64,
    pub admission: f64,
    pub balance: f64,
    pub fallback_link: f64,
    pub off_load: f64,
    pub off_hold_ms: u64,
    pub min_devices_to_activate: u32,
    pub revenue_per_device: f64,
    pub activation_cost: f64,
}

impl Default for RanThresholds {
    fn default() -> Self {
        RanThresholds {
            load: 0.8,
            active_devices: 1,
            qos_delay_fraction: 0.5,
            admission: 0.95,
            balance: 0.7,
            fallback_link: -100.0,
            off_load: 0.05,
            off_hold_ms: 1000,
            min_devices_to_activate: 1,
            revenue_per_device: 1.0,
            activation_cost: 1.0,
        }
    }
}

/// Triggers currently firing. Load and device count must strictly exceed
/// their thresholds.
pub fn evaluate_on_triggers(obs: &Observations, th: &RanThresholds) -> TriggerSet {
    let mut set = TriggerSet::default();
    if obs.offered_load > th.load {
        set.insert(Trigger::LoadThreshold);
    }
    if obs.active_devices > th.active_devices {
        set.insert(Trigger::ActiveDeviceThreshold);
    }
    if obs.incoming_handovers > 0 {
        set.insert(Trigger::ServiceContinuity);
    }
    if obs.worst_delay_ratio > th.qos_delay_fraction {
        set.insert(Trigger::QosRequirement);
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initiator {
    Device(NodeId),
    Network,
}

/// Why a slice was switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationCause {
    Triggers(TriggerSet),
    Admission(NodeId),
}

impl ActivationCause {
    /// Trigger bits, plus 16 for an admission-driven activation.
    pub fn code(&self) -> f64 {
        match self {
            ActivationCause::Triggers(t) => f64::from(t.bits()),
            ActivationCause::Admission(_) => 16.0,
        }
    }

    pub fn initiator(&self) -> Initiator {
        match self {
            ActivationCause::Triggers(_) => Initiator::Network,
            ActivationCause::Admission(d) => Initiator::Device(*d),
        }
    }
}

/// Starts activation: carves the slice's resources and enters Activating.
/// Returns the time the slice becomes Active. On capacity shortage the slice
/// stays Inactive.
pub fn slice_on(
    lc: &mut SliceLifecycle,
    grid: &mut ResourceGrid,
    resources: &[CarveRequest],
    now: SimTime,
) -> Result<SimTime, RanError> {
    if lc.state != LifecycleState::Inactive {
        return Err(RanError::IllegalTransition {
            slice: lc.slice,
            ap: lc.ap,
            from: lc.state,
            to: LifecycleState::Activating,
        });
    }
    grid.carve_subset(lc.slice, resources)
        .map_err(|source| RanError::Capacity {
            slice: lc.slice,
            ap: lc.ap,
            source,
        })?;
    lc.transition(LifecycleState::Activating, now)?;
    Ok(now + lc.activation_latency_us)
}

pub fn complete_activation(lc: &mut SliceLifecycle, now: SimTime) -> Result<(), RanError> {
    lc.transition(LifecycleState::Active, now)
}

/// Starts deactivation and returns the slice's cells to the free pool.
pub fn slice_off(lc: &mut SliceLifecycle, grid: &mut ResourceGrid, now: SimTime) -> Result<(), RanError> {
    lc.transition(LifecycleState::Deactivating, now)?;
    // A slice may be Active without a subset only if it was never carved.
    let _ = grid.release_subset(lc.slice);
    Ok(())
}

pub fn complete_deactivation(lc: &mut SliceLifecycle, now: SimTime) -> Result<(), RanError> {
    lc.transition(LifecycleState::Inactive, now)
}

/// Tracks how long the off-condition has held continuously.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OffTracker {
    since: Option<SimTime>,
}

impl OffTracker {
    /// True once load stayed below the off threshold with no active devices
    /// for the hold time.
    pub fn observe(&mut self, now: SimTime, load: f64, devices: u32, th: &RanThresholds) -> bool {
        if devices == 0 && load < th.off_load {
            let since = *self.since.get_or_insert(now);
            now - since >= th.off_hold_ms * 1000
        } else {
            self.since = None;
            false
        }
    }

    pub fn reset(&mut self) {
        self.since = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    AcceptWithActivation,
    Decline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    Overload,
    Transitioning,
    NotEligible,
    InsufficientBenefit,
    Capacity,
}

impl Reason {
    pub fn code(self) -> f64 {
        match self {
            Reason::Ok => 0.0,
            Reason::Overload => 1.0,
            Reason::Transitioning => 2.0,
            Reason::NotEligible => 3.0,
            Reason::InsufficientBenefit => 4.0,
            Reason::Capacity => 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AdmissionDecision {
    pub device: NodeId,
    pub slice: SliceNetId,
    pub ap: NodeId,
    pub verdict: Verdict,
    pub reason: Reason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissionContext {
    pub state: LifecycleState,
    pub eligible: bool,
    /// Current slice load at the AP as a fraction of its capacity.
    pub load: f64,
    /// Devices that would use the slice here if it were switched on,
    /// including the requester.
    pub projected_devices: u32,
}

pub fn admit(
    device: NodeId,
    slice: SliceNetId,
    ap: NodeId,
    ctx: &AdmissionContext,
    th: &RanThresholds,
) -> AdmissionDecision {
    let (verdict, reason) = if !ctx.eligible {
        (Verdict::Decline, Reason::NotEligible)
    } else {
        match ctx.state {
            LifecycleState::Active | LifecycleState::Activating => {
                if ctx.load < th.admission {
                    (Verdict::Accept, Reason::Ok)
                } else {
                    (Verdict::Decline, Reason::Overload)
                }
            }
            LifecycleState::Inactive => {
                let revenue = f64::from(ctx.projected_devices) * th.revenue_per_device;
                if ctx.projected_devices >= th.min_devices_to_activate && revenue >= th.activation_cost {
                    (Verdict::AcceptWithActivation, Reason::Ok)
                } else {
                    (Verdict::Decline, Reason::InsufficientBenefit)
                }
            }
            LifecycleState::Deactivating => (Verdict::Decline, Reason::Transitioning),
        }
    };
    AdmissionDecision {
        device,
        slice,
        ap,
        verdict,
        reason,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub ap: NodeId,
    pub link_quality: f64,
    pub slice_active: bool,
    /// The slice's RAN architecture allows this AP class.
    pub eligible: bool,
}

/// Prefers eligible APs running the slice (best link); otherwise the best
/// eligible AP whose link clears `fallback`.
pub fn associate(candidates: &[Candidate], fallback: f64) -> Option<NodeId> {
    let best = |iter: &mut dyn Iterator<Item = &Candidate>| {
        iter.fold(None::<&Candidate>, |acc, c| match acc {
            Some(a) if a.link_quality > c.link_quality
                || (a.link_quality == c.link_quality && a.ap < c.ap) =>
            {
                Some(a)
            }
            _ => Some(c),
        })
        .map(|c| c.ap)
    };
    let active = best(&mut candidates.iter().filter(|c| c.eligible && c.slice_active));
    active.or_else(|| {
        best(
            &mut candidates
                .iter()
                .filter(|c| c.eligible && c.link_quality >= fallback),
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApSliceLoad {
    pub ap: NodeId,
    pub load: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttachedDevice {
    pub device: NodeId,
    pub ap: NodeId,
    pub links: BTreeMap<NodeId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reassignment {
    pub slice: SliceNetId,
    pub device: NodeId,
    pub from: NodeId,
    pub to: NodeId,
}

/// Greedy per-slice balancing: each overloaded AP hands one device to the
/// least-loaded active neighbour it can reach.
pub fn load_balance(
    slice: SliceNetId,
    aps: &[ApSliceLoad],
    devices: &[AttachedDevice],
    th: &RanThresholds,
) -> Vec<Reassignment> {
    let mut loads: BTreeMap<NodeId, f64> = aps.iter().filter(|a| a.active).map(|a| (a.ap, a.load)).collect();
    let mut moved: BTreeSet<NodeId> = BTreeSet::new();
    let mut out = Vec::new();
    let overloaded: Vec<NodeId> = aps
        .iter()
        .filter(|a| a.active && a.load > th.balance)
        .map(|a| a.ap)
        .collect();

    for from in overloaded {
        let mut best: Option<(f64, f64, NodeId, NodeId)> = None; // (load, -link, device, to)
        for d in devices.iter().filter(|d| d.ap == from && !moved.contains(&d.device)) {
            for (to, link) in &d.links {
                if *to == from || *link < th.fallback_link {
                    continue;
                }
                let Some(load) = loads.get(to).copied() else { continue };
                if load >= th.balance {
                    continue;
                }
                let key = (load, -link, d.device, *to);
                let better = match best {
                    None => true,
                    Some(b) => key.partial_cmp(&b) == Some(std::cmp::Ordering::Less),
                };
                if better {
                    best = Some(key);
                }
            }
        }
        if let Some((_, _, device, to)) = best {
            moved.insert(device);
            out.push(Reassignment {
                slice,
                device,
                from,
                to,
            });
            // Later decisions in this pass see the target as slightly busier.
            if let Some(l) = loads.get_mut(&to) {
                *l += f64::EPSILON;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlFunction {
    Paging,
    CellReselection,
    TrackingAreaUpdate,
    Handover,
    DedicatedBearerSetup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Idle,
    Connected,
}

impl ControlFunction {
    pub const ALL: [ControlFunction; 5] = [
        ControlFunction::Paging,
        ControlFunction::CellReselection,
        ControlFunction::TrackingAreaUpdate,
        ControlFunction::Handover,
        ControlFunction::DedicatedBearerSetup,
    ];

    pub fn mode(self) -> Mode {
        match self {
            ControlFunction::Paging | ControlFunction::CellReselection | ControlFunction::TrackingAreaUpdate => {
                Mode::Idle
            }
            ControlFunction::Handover | ControlFunction::DedicatedBearerSetup => Mode::Connected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "CuPlaneRepr", into = "String")]
pub enum CuPlaneOption {
    /// Common C-plane, per-slice U-plane.
    Option1,
    /// Per-slice C-plane and U-plane.
    Option2,
    /// Common idle-mode C-plane, per-slice connected-mode C-plane.
    Option3,
}

impl TryFrom<u8> for CuPlaneOption {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(CuPlaneOption::Option1),
            2 => Ok(CuPlaneOption::Option2),
            3 => Ok(CuPlaneOption::Option3),
            _ => Err(format!("C/U-plane option must be 1, 2 or 3, got {v}")),
        }
    }
}

/// Accepted spellings: `3`, `"3"`, `"option3"`.
#[derive(Deserialize)]
#[serde(untagged)]
enum CuPlaneRepr {
    Number(u8),
    Text(String),
}

impl TryFrom<CuPlaneRepr> for CuPlaneOption {
    type Error = String;

    fn try_from(r: CuPlaneRepr) -> Result<Self, String> {
        match r {
            CuPlaneRepr::Number(n) => n.try_into(),
            CuPlaneRepr::Text(t) => {
                let digits = t.strip_prefix("option").unwrap_or(&t);
                digits
                    .parse::<u8>()
                    .map_err(|_| format!("unknown C/U-plane option '{t}'"))?
                    .try_into()
            }
        }
    }
}

impl From<CuPlaneOption> for String {
    fn from(o: CuPlaneOption) -> String {
        o.to_string()
    }
}

impl From<CuPlaneOption> for u8 {
    fn from(o: CuPlaneOption) -> u8 {
        match o {
            CuPlaneOption::Option1 => 1,
            CuPlaneOption::Option2 => 2,
            CuPlaneOption::Option3 => 3,
        }
    }
}

impl fmt::Display for CuPlaneOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "option{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Common,
    SliceSpecific,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CuPlaneConfig {
    pub option: CuPlaneOption,
    pub placement: BTreeMap<ControlFunction, Placement>,
}

impl CuPlaneConfig {
    pub fn count(&self, p: Placement) -> usize {
        self.placement.values().filter(|x| **x == p).count()
    }

    pub fn common_functions(&self) -> impl Iterator<Item = ControlFunction> + '_ {
        self.placement
            .iter()
            .filter(|(_, p)| **p == Placement::Common)
            .map(|(f, _)| *f)
    }
}

pub fn configure_cu_plane(option: CuPlaneOption) -> CuPlaneConfig {
    let placement = ControlFunction::ALL
        .into_iter()
        .map(|f| {
            let p = match option {
                CuPlaneOption::Option1 => Placement::Common,
                CuPlaneOption::Option2 => Placement::SliceSpecific,
                CuPlaneOption::Option3 => match f.mode() {
                    Mode::Idle => Placement::Common,
                    Mode::Connected => Placement::SliceSpecific,
                },
            };
            (f, p)
        })
        .collect();
    CuPlaneConfig { option, placement }
}

/// Control-plane cost at one AP: each common function runs once, each
/// slice-specific function once per active slice.
pub fn control_plane_overhead<'a>(active: impl IntoIterator<Item = &'a CuPlaneConfig>, per_function_cost: f64) -> f64 {
    let mut common: BTreeSet<ControlFunction> = BTreeSet::new();
    let mut specific = 0usize;
    for cfg in active {
        common.extend(cfg.common_functions());
        specific += cfg.count(Placement::SliceSpecific);
    }
    (common.len() + specific) as f64 * per_function_cost
}
