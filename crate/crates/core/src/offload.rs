//! Computation offloading over a horizontal slice: M-plane negotiation, task
//! slicing, container packing, transfer over a dedicated logical channel,
//! remote execution and result return.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{FlowId, NodeId, SessionId, SliceNetId};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub node: NodeId,
    /// Mega-operations per second.
    pub total_capacity: f64,
    /// Fraction kept for the node's own applications.
    pub reserved_local: f64,
}

impl ComputeProfile {
    pub fn shareable(&self) -> f64 {
        self.total_capacity * (1.0 - self.reserved_local)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceableTask {
    pub id: u32,
    /// Mega-operations.
    pub total_ops: f64,
    pub sliceable_fraction: f64,
    pub ship_bytes: u64,
    pub result_bytes: u64,
    pub deadline_ms: Option<f64>,
}

impl SliceableTask {
    pub fn offloadable_ops(&self) -> f64 {
        self.total_ops * self.sliceable_fraction
    }

    pub fn local_ops(&self) -> f64 {
        self.total_ops - self.offloadable_ops()
    }
}

/// Periodically broadcast by a host on the horizontal slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostAdvertisement {
    pub host: NodeId,
    pub shareable: f64,
    pub signaling_rtt_us: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadDecision {
    Local,
    RequestOffload,
}

/// Stage durations in seconds behind a decision.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct OffloadEstimate {
    pub local: f64,
    pub signaling: f64,
    pub ship: f64,
    pub remote: f64,
    pub result: f64,
    /// Non-offloadable part, executed on the client alongside the remote part.
    pub local_part: f64,
    pub os_overhead: f64,
    pub offload: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffloadPlan {
    pub decision: OffloadDecision,
    pub estimate: OffloadEstimate,
    pub granted_estimate: f64,
    /// The task cannot meet its deadline on the client alone.
    pub capacity_shortfall: bool,
}

/// Number of OS-level stages charged when slicing runs at or above the OS.
pub const OS_STAGES: u32 = 3;

/// Offload iff the estimated offload completion beats local execution:
///
/// `offload = rtt + os + max(ship + remote + result, local_part)`
/// where transfers run at `link_rate_bps` and the remote part at
/// `min(asked, advertised shareable)`.
pub fn decide_offload(
    task: &SliceableTask,
    client: &ComputeProfile,
    adv: &HostAdvertisement,
    link_rate_bps: f64,
    asked: f64,
    os_overhead_per_stage_s: f64,
) -> OffloadPlan {
    let local = task.total_ops / client.total_capacity;
    let granted = asked.min(adv.shareable).max(0.0);
    let capacity_shortfall = task.deadline_ms.map_or(false, |d| local * 1000.0 > d);

    let mut est = OffloadEstimate {
        local,
        ..Default::default()
    };
    let feasible = task.sliceable_fraction > 0.0 && granted > 0.0 && link_rate_bps > 0.0;
    if !feasible {
        est.offload = f64::INFINITY;
        return OffloadPlan {
            decision: OffloadDecision::Local,
            estimate: est,
            granted_estimate: granted,
            capacity_shortfall,
        };
    }
    est.signaling = adv.signaling_rtt_us as f64 / 1e6;
    est.ship = task.ship_bytes as f64 * 8.0 / link_rate_bps;
    est.remote = task.offloadable_ops() / granted;
    est.result = task.result_bytes as f64 * 8.0 / link_rate_bps;
    est.local_part = task.local_ops() / client.total_capacity;
    est.os_overhead = os_overhead_per_stage_s * f64::from(OS_STAGES);
    est.offload = est.signaling + est.os_overhead + (est.ship + est.remote + est.result).max(est.local_part);

    let decision = if est.offload < est.local {
        OffloadDecision::RequestOffload
    } else {
        OffloadDecision::Local
    };
    OffloadPlan {
        decision,
        estimate: est,
        granted_estimate: granted,
        capacity_shortfall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SessionState {
    Idle,
    Requested,
    Accepted,
    Declined,
    Sliced,
    Shipped,
    Executing,
    Returned,
    Applied,
    Failed,
}

impl SessionState {
    pub fn code(self) -> f64 {
        self as u8 as f64
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Declined | SessionState::Applied | SessionState::Failed)
    }
}

/// The nominal order of a successful session.
pub const NOMINAL_ORDER: [SessionState; 8] = [
    SessionState::Idle,
    SessionState::Requested,
    SessionState::Accepted,
    SessionState::Sliced,
    SessionState::Shipped,
    SessionState::Executing,
    SessionState::Returned,
    SessionState::Applied,
];

fn legal(from: SessionState, to: SessionState) -> bool {
    use SessionState::*;
    if to == Failed {
        return !from.is_terminal();
    }
    matches!(
        (from, to),
        (Idle, Requested)
            | (Requested, Accepted)
            | (Requested, Declined)
            | (Accepted, Sliced)
            | (Sliced, Shipped)
            | (Shipped, Executing)
            | (Executing, Returned)
            | (Returned, Applied)
    )
}

/// True when `states` follows the nominal order (or request → decline),
/// with `Failed` allowed only as the final deviation.
pub fn conforms(states: &[SessionState]) -> bool {
    let (body, _) = match states.split_last() {
        Some((SessionState::Failed, rest)) => (rest, true),
        _ => (states, false),
    };
    let declined = [SessionState::Idle, SessionState::Requested, SessionState::Declined];
    body.len() <= NOMINAL_ORDER.len() && NOMINAL_ORDER[..body.len()] == *body
        || body == declined
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    LinkLoss,
    Timeout,
    HostFailure,
    DigestMismatch,
}

impl FailureReason {
    pub fn code(self) -> f64 {
        match self {
            FailureReason::LinkLoss => 1.0,
            FailureReason::Timeout => 2.0,
            FailureReason::HostFailure => 3.0,
            FailureReason::DigestMismatch => 4.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OffloadError {
    #[error("session {session}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition {
        session: SessionId,
        from: SessionState,
        to: SessionState,
    },
    #[error("task {0} already has an offload session")]
    DuplicateSession(u32),
    #[error("link between {0} and {1} is down")]
    LinkDown(NodeId, NodeId),
    #[error("container digest mismatch: expected {expected:08x}, got {actual:08x}")]
    DigestMismatch { expected: u32, actual: u32 },
    #[error("malformed container payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadSession {
    pub id: SessionId,
    pub client: NodeId,
    pub host: NodeId,
    pub slice: SliceNetId,
    pub task: SliceableTask,
    pub state: SessionState,
    pub granted: f64,
    pub history: Vec<(SessionState, SimTime)>,
    pub failure: Option<FailureReason>,
}

impl OffloadSession {
    pub fn new(id: SessionId, client: NodeId, host: NodeId, slice: SliceNetId, task: SliceableTask, now: SimTime) -> Self {
        OffloadSession {
            id,
            client,
            host,
            slice,
            task,
            state: SessionState::Idle,
            granted: 0.0,
            history: vec![(SessionState::Idle, now)],
            failure: None,
        }
    }

    pub fn advance(&mut self, to: SessionState, now: SimTime) -> Result<(), OffloadError> {
        if !legal(self.state, to) {
            return Err(OffloadError::IllegalTransition {
                session: self.id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        self.history.push((to, now));
        Ok(())
    }

    pub fn fail(&mut self, reason: FailureReason, now: SimTime) -> Result<(), OffloadError> {
        self.advance(SessionState::Failed, now)?;
        self.failure = Some(reason);
        Ok(())
    }

    pub fn entered(&self, state: SessionState) -> Option<SimTime> {
        self.history.iter().find(|(s, _)| *s == state).map(|(_, t)| *t)
    }

    pub fn states(&self) -> Vec<SessionState> {
        self.history.iter().map(|(s, _)| *s).collect()
    }

    /// Applied − Requested, when both happened.
    pub fn total_latency(&self) -> Option<SimTime> {
        Some(self.entered(SessionState::Applied)? - self.entered(SessionState::Requested)?)
    }
}

/// Client-side bookkeeping enforcing one session per task.
#[derive(Debug, Clone, Default)]
pub struct ClientMplane {
    by_task: BTreeMap<u32, SessionId>,
}

impl ClientMplane {
    /// Moves a fresh session to Requested. The caller schedules the L3
    /// signaling message.
    pub fn mplane_request(&mut self, session: &mut OffloadSession, now: SimTime, link_up: bool) -> Result<(), OffloadError> {
        if self.by_task.contains_key(&session.task.id) {
            return Err(OffloadError::DuplicateSession(session.task.id));
        }
        self.by_task.insert(session.task.id, session.id);
        session.advance(SessionState::Requested, now)?;
        if !link_up {
            session.fail(FailureReason::LinkLoss, now)?;
            return Err(OffloadError::LinkDown(session.client, session.host));
        }
        Ok(())
    }

    pub fn session_for(&self, task: u32) -> Option<SessionId> {
        self.by_task.get(&task).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HostVerdict {
    Grant(f64),
    Decline,
}

/// Host-side capacity ledger. Grants are partitions of the shareable capacity.
#[derive(Debug, Clone)]
pub struct HostLedger {
    pub profile: ComputeProfile,
    pub floor: f64,
    grants: BTreeMap<SessionId, f64>,
}

impl HostLedger {
    pub fn new(profile: ComputeProfile, floor: f64) -> Self {
        HostLedger {
            profile,
            floor,
            grants: BTreeMap::new(),
        }
    }

    pub fn granted_total(&self) -> f64 {
        self.grants.values().sum()
    }

    pub fn remaining(&self) -> f64 {
        (self.profile.shareable() - self.granted_total()).max(0.0)
    }

    pub fn active_sessions(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.grants.keys().copied()
    }

    pub fn host_admit(&mut self, session: SessionId, asked: f64) -> HostVerdict {
        let remaining = self.remaining();
        if remaining < self.floor || remaining <= 0.0 {
            return HostVerdict::Decline;
        }
        let grant = asked.min(remaining);
        self.grants.insert(session, grant);
        HostVerdict::Grant(grant)
    }

    /// Returns the session's capacity to the shareable pool.
    pub fn refund(&mut self, session: SessionId) -> f64 {
        self.grants.remove(&session).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPart {
    pub ops: f64,
}

/// Code shipped to the host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteDescriptor {
    pub session: SessionId,
    pub task: u32,
    pub ops: f64,
    pub ship_bytes: u64,
    pub result_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub session: SessionId,
    pub task: u32,
    pub result_bytes: u64,
}

/// Splits by the sliceable fraction; the grant only affects timing.
pub fn slice_task(session: SessionId, task: &SliceableTask) -> (LocalPart, RemoteDescriptor) {
    (
        LocalPart { ops: task.local_ops() },
        RemoteDescriptor {
            session,
            task: task.id,
            ops: task.offloadable_ops(),
            ship_bytes: task.ship_bytes,
            result_bytes: task.result_bytes,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerDirection {
    CodeToHost,
    ResultToClient,
}

impl fmt::Display for ContainerDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerDirection::CodeToHost => f.write_str("code_to_host"),
            ContainerDirection::ResultToClient => f.write_str("result_to_client"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Code(RemoteDescriptor),
    Result(ExecResult),
}

impl Payload {
    fn wire_bytes(&self) -> u64 {
        match self {
            Payload::Code(d) => d.ship_bytes,
            Payload::Result(r) => r.result_bytes,
        }
    }

    fn direction(&self) -> ContainerDirection {
        match self {
            Payload::Code(_) => ContainerDirection::CodeToHost,
            Payload::Result(_) => ContainerDirection::ResultToClient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub session: SessionId,
    pub direction: ContainerDirection,
    /// Size on the air interface.
    pub payload_bytes: u64,
    pub content: Vec<u8>,
    pub payload_digest: u32,
}

fn digest(content: &[u8], payload_bytes: u64) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(content);
    h.update(&payload_bytes.to_le_bytes());
    h.finalize()
}

pub fn pack_container(session: SessionId, payload: &Payload) -> Container {
    let content = serde_json::to_vec(payload).expect("payload types always serialize");
    let payload_bytes = payload.wire_bytes();
    Container {
        session,
        direction: payload.direction(),
        payload_bytes,
        payload_digest: digest(&content, payload_bytes),
        content,
    }
}

pub fn unpack_container(c: &Container) -> Result<Payload, OffloadError> {
    let actual = digest(&c.content, c.payload_bytes);
    if actual != c.payload_digest {
        return Err(OffloadError::DigestMismatch {
            expected: c.payload_digest,
            actual,
        });
    }
    serde_json::from_slice(&c.content).map_err(|e| OffloadError::Malformed(e.to_string()))
}

/// Logical channel reserved for container traffic on a horizontal slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L2LogicalChannel {
    pub id: FlowId,
    pub slice: SliceNetId,
    pub ap: NodeId,
    pub pdu_size: u64,
}

impl L2LogicalChannel {
    /// PDU sizes for a payload; an empty payload needs none.
    pub fn segment(&self, payload_bytes: u64) -> Vec<u64> {
        let n = pdu_count(payload_bytes, self.pdu_size);
        (0..n)
            .map(|i| (payload_bytes - i * self.pdu_size).min(self.pdu_size))
            .collect()
    }
}

pub fn pdu_count(payload_bytes: u64, pdu_size: u64) -> u64 {
    payload_bytes.div_ceil(pdu_size.max(1))
}

/// Remote execution time at the granted rate, whole microseconds.
pub fn execution_time_us(ops: f64, granted: f64) -> SimTime {
    if ops <= 0.0 {
        return 0;
    }
    (ops / granted * 1e6).ceil() as SimTime
}
