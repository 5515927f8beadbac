//! One scenario run: access points with their grids and slice lifecycles,
//! devices with slice memberships, flows, core functions and offload
//! sessions, all driven by the event engine.
//!
//! Radio scheduling runs on a global 1 ms tick. Every AP is visited in id
//! order: random access opportunities, then trigger evaluation, then the
//! two-level MAC.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::cn::{
    resolve_path, CnSlice, CnSliceId, E2EFlowPath, FunctionQueue, PairingMap, PathRecord, SliceKind, VirtualFunction,
};
use crate::grid::{Cell, ResourceGrid};
use crate::ids::{FlowId, NodeId, SessionId, SliceNetId};
use crate::mac::{l1_schedule, l2_allocate, serve, update_averages, CellCapacity, L1State, TrafficFlow};
use crate::offload::{
    conforms, decide_offload, execution_time_us, pack_container, pdu_count, slice_task, unpack_container,
    ClientMplane, ComputeProfile, ContainerDirection, ExecResult, FailureReason, HostAdvertisement, HostLedger,
    HostVerdict, OffloadDecision, OffloadError, OffloadPlan, OffloadSession, Payload, RemoteDescriptor,
    SessionState, SliceableTask,
};
use crate::phy::{
    emit_common_dci, rach_common_with_activation, route_access, AccessRoute, CommonAccessResult, RachConfig,
    RachOutcome, RachProcess, SliceDci,
};
use crate::ran::{
    admit, associate, complete_activation, complete_deactivation, configure_cu_plane, control_plane_overhead,
    evaluate_on_triggers, load_balance, slice_off, slice_on, ActivationCause, AdmissionContext, ApSliceLoad,
    AttachedDevice, Candidate, CuPlaneConfig, LifecycleState, Observations, OffTracker, RanThresholds,
    SliceLifecycle, Verdict,
};
use crate::grid::CarveRequest;
use crate::scenario::{NodeKind, Scenario};
use crate::sim::{Engine, MetricRecord, MetricsBus, NodeNames, RngStreams, SimTime, StreamKey, SUBFRAME_US};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub duration_ms: Option<u64>,
    /// Overrides the scenario's runtime audit switch.
    pub audit: Option<bool>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("scenario cannot be built: {0}")]
    Build(String),
    #[error("invariant '{invariant}' violated at {time} us: {detail}")]
    Invariant {
        time: SimTime,
        invariant: &'static str,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RachLog {
    pub time: SimTime,
    pub ap: NodeId,
    pub outcome: RachOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditStats {
    pub enabled: bool,
    /// (AP, subframe) pairs whose MAC output was checked.
    pub subframes_checked: u64,
    pub cells_checked: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: String,
    pub seed: u64,
    pub duration_us: SimTime,
    pub events: u64,
    pub records: Vec<MetricRecord>,
    pub names: NodeNames,
    pub paths: Vec<PathRecord>,
    pub rach: Vec<RachLog>,
    pub sessions: Vec<OffloadSession>,
    /// Task id, plan and the session it opened, if any.
    pub plans: Vec<(u32, OffloadPlan, Option<SessionId>)>,
    pub audit: AuditStats,
}

/// Runs a validated scenario.
pub fn run(sc: &Scenario, opts: RunOptions) -> Result<RunOutput, RunError> {
    World::build(sc, opts)?.run()
}

#[derive(Debug, Clone)]
enum Ev {
    Tick,
    FlowArrival(FlowId),
    WindowOpen(NodeId),
    WindowClose(NodeId),
    Access(NodeId, SliceNetId),
    ActivationDone(NodeId, SliceNetId),
    DeactivationDone(NodeId, SliceNetId),
    Handover(NodeId, NodeId),
    CnHop { flow: FlowId, bytes: u64, hop: usize },
    RachBurst(usize),
    LinkFailure(NodeId),
    HostFailure(NodeId),
    Advert(NodeId),
    TaskArrival(usize),
    RequestAtHost(SessionId),
    ResponseAtClient(SessionId, bool),
    SliceDone(SessionId),
    TransferDone(SessionId, ContainerDirection),
    ExecStart(SessionId),
    ExecDone(SessionId),
    ApplyDone(SessionId),
    LocalTaskDone(usize),
    StageTimeout(SessionId, usize),
}

struct SliceInfo {
    kind: SliceKind,
    policy: crate::mac::Policy,
    pool_weight: Option<f64>,
    cu: CuPlaneConfig,
    eligible: BTreeSet<String>,
    activation_latency_us: SimTime,
    rach: Option<RachConfig>,
    requests: Vec<CarveRequest>,
    /// Nominal bytes per subframe the slice can carry at one AP.
    nominal_bytes: f64,
    pinned_at: BTreeSet<NodeId>,
}

struct ApSlice {
    lc: SliceLifecycle,
    l1: L1State,
    rach: Option<RachProcess>,
    off: OffTracker,
    pinned: bool,
    handovers_in: u32,
    served_since_eval: u64,
}

struct Ap {
    class: String,
    grid: ResourceGrid,
    cap: CellCapacity,
    common_rach: RachProcess,
    slices: BTreeMap<SliceNetId, ApSlice>,
    last_cp: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MemberState {
    Idle,
    Waiting,
    Contending(NodeId),
    Attached(NodeId),
}

struct Member {
    state: MemberState,
    /// AP picked at the last association attempt.
    target: Option<NodeId>,
}

enum FlowKind {
    Vertical { path: E2EFlowPath, cn: usize, downlink: bool },
    Horizontal,
    Container,
}

struct FlowRt {
    tf: TrafficFlow,
    kind: FlowKind,
    packet_bytes: u64,
    interval_us: SimTime,
    stop_us: SimTime,
    sibling: Option<FlowId>,
    local_fraction: f64,
    sent: u64,
    diverted: u64,
}

impl FlowRt {
    fn nominal_bytes(&self) -> f64 {
        if self.interval_us == 0 {
            0.0
        } else {
            self.packet_bytes as f64 * SUBFRAME_US as f64 / self.interval_us as f64
        }
    }
}

struct TaskRt {
    client: NodeId,
    host: NodeId,
    at: SimTime,
    task: SliceableTask,
    asked: Option<f64>,
}

struct Pending {
    last_packet: u64,
    session: SessionId,
    dir: ContainerDirection,
    container: crate::offload::Container,
}

struct OffloadRt {
    slice: SliceNetId,
    rtt_us: SimTime,
    os_us: SimTime,
    timeout_us: SimTime,
    advert_us: SimTime,
    pdu_size: u64,
    profiles: BTreeMap<NodeId, ComputeProfile>,
    ledgers: BTreeMap<NodeId, HostLedger>,
    failed_hosts: BTreeSet<NodeId>,
    down: BTreeSet<NodeId>,
    adverts: BTreeMap<NodeId, HostAdvertisement>,
    tasks: Vec<TaskRt>,
    sessions: Vec<OffloadSession>,
    plans: Vec<(u32, OffloadPlan, Option<SessionId>)>,
    mplane: BTreeMap<NodeId, ClientMplane>,
    up: BTreeMap<NodeId, FlowId>,
    down_flow: BTreeMap<NodeId, FlowId>,
    pending: BTreeMap<FlowId, VecDeque<Pending>>,
    delivered: BTreeMap<(SessionId, ContainerDirection), crate::offload::Container>,
    remote: BTreeMap<SessionId, RemoteDescriptor>,
    local_end: BTreeMap<SessionId, SimTime>,
}

struct World {
    name: String,
    eng: Engine<Ev>,
    bus: MetricsBus,
    rng: RngStreams,
    t_end: SimTime,
    audit: AuditStats,
    th: RanThresholds,
    control_cost: f64,
    pf_window: f64,
    trigger_period: u64,
    balance_period: u64,
    retry_us: SimTime,
    deactivation_us: SimTime,
    names: Vec<String>,
    n_nodes: u32,
    aps: BTreeMap<NodeId, Ap>,
    slices: BTreeMap<SliceNetId, SliceInfo>,
    members: BTreeMap<(NodeId, SliceNetId), Member>,
    memberships: BTreeMap<NodeId, Vec<SliceNetId>>,
    links: BTreeMap<NodeId, BTreeMap<NodeId, f64>>,
    windows: BTreeMap<NodeId, Vec<(SimTime, SimTime)>>,
    open: BTreeSet<NodeId>,
    flows: Vec<FlowRt>,
    functions: Vec<VirtualFunction>,
    queues: Vec<FunctionQueue>,
    cn_slices: Vec<CnSlice>,
    pairing: PairingMap,
    paths: Vec<PathRecord>,
    rach_log: Vec<RachLog>,
    common_pending: BTreeMap<(NodeId, NodeId), SliceNetId>,
    next_synthetic: u32,
    bursts: Vec<(NodeId, Option<SliceNetId>, u32)>,
    off: Option<OffloadRt>,
}

fn ms(v: u64) -> SimTime {
    v * 1000
}

fn invariant(time: SimTime, invariant: &'static str, detail: impl Into<String>) -> RunError {
    RunError::Invariant {
        time,
        invariant,
        detail: detail.into(),
    }
}

impl World {
    fn build(sc: &Scenario, opts: RunOptions) -> Result<World, RunError> {
        let build = |e: String| RunError::Build(e);
        let seed = opts.seed.unwrap_or(sc.master_seed);
        let duration_ms = opts.duration_ms.unwrap_or(sc.duration_ms);
        let grid = sc.build_grid().map_err(build)?;
        let node_id = |name: &str| -> Result<NodeId, RunError> {
            sc.node_index(name)
                .map(|i| NodeId(i as u32))
                .ok_or_else(|| RunError::Build(format!("unknown node '{name}'")))
        };

        let base_cap = CellCapacity::for_grid(&grid, sc.sim.cell_bytes);
        let pool_bytes = (0..grid.period())
            .flat_map(|p| grid.pool_cells(p).iter().map(|c| base_cap.bytes(c)))
            .sum::<u64>() as f64
            / f64::from(grid.period().max(1));
        let total_weight: f64 = sc.slices.iter().filter_map(|s| s.pool_weight).sum();

        let mut slices = BTreeMap::new();
        for s in &sc.slices {
            let requests = sc.carve_requests(s, &grid).map_err(build)?;
            let mut probe = grid.clone();
            let nominal_own = probe
                .carve_subset(SliceNetId(s.id), &requests)
                .map(|sub| sub.cells().iter().map(|c| base_cap.bytes(c)).sum::<u64>() as f64)
                .map_err(|e| RunError::Build(e.to_string()))?
                / f64::from(grid.period());
            let pool_share = s.pool_weight.map_or(0.0, |w| pool_bytes * w / total_weight);
            let mut pinned_at = BTreeSet::new();
            for ap in &s.active_at {
                pinned_at.insert(node_id(ap)?);
            }
            slices.insert(
                SliceNetId(s.id),
                SliceInfo {
                    kind: s.kind,
                    policy: s.policy,
                    pool_weight: s.pool_weight,
                    cu: configure_cu_plane(s.cu_plane.unwrap_or(sc.ran.cu_plane)),
                    eligible: s.eligible.iter().cloned().collect(),
                    activation_latency_us: ms(s.activation_latency_ms.unwrap_or(sc.ran.activation_latency_ms)),
                    rach: s.rach,
                    requests,
                    nominal_bytes: nominal_own + pool_share,
                    pinned_at,
                },
            );
        }

        let mut aps = BTreeMap::new();
        let mut members = BTreeMap::new();
        let mut memberships = BTreeMap::new();
        let mut links = BTreeMap::new();
        let mut windows = BTreeMap::new();
        for (i, n) in sc.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            match n.kind {
                NodeKind::Ap => {
                    let mut ap_slices = BTreeMap::new();
                    for (sid, info) in &slices {
                        let lc = SliceLifecycle::new(*sid, id, info.activation_latency_us);
                        ap_slices.insert(
                            *sid,
                            ApSlice {
                                lc,
                                l1: L1State::default(),
                                rach: info.rach.map(|r| RachProcess::new(r, Some(*sid))),
                                off: OffTracker::default(),
                                pinned: info.pinned_at.contains(&id),
                                handovers_in: 0,
                                served_since_eval: 0,
                            },
                        );
                    }
                    aps.insert(
                        id,
                        Ap {
                            class: n.class.clone(),
                            grid: grid.clone(),
                            cap: base_cap.clone(),
                            common_rach: RachProcess::new(sc.common_rach, None),
                            slices: ap_slices,
                            last_cp: None,
                        },
                    );
                }
                NodeKind::Device => {
                    let ss: Vec<SliceNetId> = n.slices.iter().map(|s| SliceNetId(*s)).collect();
                    for s in &ss {
                        members.insert(
                            (id, *s),
                            Member {
                                state: MemberState::Idle,
                                target: None,
                            },
                        );
                    }
                    memberships.insert(id, ss);
                    let mut l = BTreeMap::new();
                    for (ap, q) in &n.links {
                        l.insert(node_id(ap)?, *q);
                    }
                    links.insert(id, l);
                    let w: Vec<(SimTime, SimTime)> = if n.windows.is_empty() {
                        vec![(0, SimTime::MAX)]
                    } else {
                        n.windows.iter().map(|w| (ms(w[0]), ms(w[1]))).collect()
                    };
                    windows.insert(id, w);
                }
                NodeKind::Infra => {}
            }
        }

        let functions: Vec<VirtualFunction> = sc
            .cn
            .functions
            .iter()
            .map(|f| VirtualFunction {
                name: f.name.clone(),
                processing_rate_per_ms: f.rate_per_ms,
                per_packet_latency_us: f.latency_us,
                host: f.host.clone(),
            })
            .collect();
        let cn_slices: Vec<CnSlice> = sc
            .cn
            .slices
            .iter()
            .map(|s| CnSlice {
                id: CnSliceId(s.id.clone()),
                chain: s
                    .chain
                    .iter()
                    .filter_map(|n| functions.iter().position(|f| &f.name == n))
                    .collect(),
                target_service: s.service.clone(),
            })
            .collect();
        let cn_map: BTreeMap<CnSliceId, CnSlice> = cn_slices.iter().map(|s| (s.id.clone(), s.clone())).collect();
        let pairing = sc.pairing_map();

        let mut flows = Vec::new();
        for (i, f) in sc.flows.iter().enumerate() {
            let device = node_id(&f.device)?;
            let slice = SliceNetId(f.slice);
            let kind = match slices.get(&slice).map(|s| s.kind) {
                Some(SliceKind::Vertical) => {
                    let path = resolve_path(FlowId(i as u32), slice, &f.service, f.direction, &pairing, &cn_map)
                        .map_err(|e| RunError::Build(e.to_string()))?;
                    let cn = cn_slices.iter().position(|c| c.id == path.cn).expect("resolved CN slice exists");
                    FlowKind::Vertical {
                        path,
                        cn,
                        downlink: f.direction == crate::cn::Direction::Downlink,
                    }
                }
                Some(SliceKind::Horizontal) => FlowKind::Horizontal,
                None => return Err(RunError::Build(format!("flow {i}: unknown slice {slice}"))),
            };
            flows.push(FlowRt {
                tf: TrafficFlow::new(FlowId(i as u32), device, slice, f.qos),
                kind,
                packet_bytes: f.packet_bytes,
                interval_us: (f.interval_ms * 1000.0).round().max(1.0) as SimTime,
                stop_us: f.stop_ms.map_or(SimTime::MAX, ms),
                sibling: None,
                local_fraction: f.local_fraction,
                sent: 0,
                diverted: 0,
            });
        }
        for i in 0..sc.flows.len() {
            let f = &sc.flows[i];
            if let (true, Some(ls)) = (f.local_fraction > 0.0, f.local_slice) {
                let id = FlowId(flows.len() as u32);
                let device = flows[i].tf.device;
                flows.push(FlowRt {
                    tf: TrafficFlow::new(id, device, SliceNetId(ls), f.qos),
                    kind: FlowKind::Horizontal,
                    packet_bytes: 0,
                    interval_us: 0,
                    stop_us: 0,
                    sibling: None,
                    local_fraction: 0.0,
                    sent: 0,
                    diverted: 0,
                });
                flows[i].sibling = Some(id);
            }
        }

        let off = match &sc.offload {
            None => None,
            Some(o) => {
                let slice = SliceNetId(o.slice);
                let mut profiles = BTreeMap::new();
                let mut ledgers = BTreeMap::new();
                for (i, n) in sc.nodes.iter().enumerate() {
                    if let Some(c) = n.compute {
                        let p = ComputeProfile {
                            node: NodeId(i as u32),
                            total_capacity: c.capacity,
                            reserved_local: c.reserved_local,
                        };
                        profiles.insert(p.node, p);
                        if n.kind == NodeKind::Ap {
                            ledgers.insert(p.node, HostLedger::new(p, o.host_floor));
                        }
                    }
                }
                let mut tasks = Vec::new();
                for t in &o.tasks {
                    for k in 0..t.count {
                        tasks.push(TaskRt {
                            client: node_id(&t.client)?,
                            host: node_id(&t.host)?,
                            at: ms(t.at_ms + u64::from(k) * t.every_ms),
                            task: SliceableTask {
                                id: t.id + k,
                                total_ops: t.total_ops,
                                sliceable_fraction: t.sliceable_fraction,
                                ship_bytes: t.ship_bytes,
                                result_bytes: t.result_bytes,
                                deadline_ms: t.deadline_ms,
                            },
                            asked: t.asked,
                        });
                    }
                }
                let mut up = BTreeMap::new();
                let mut down_flow = BTreeMap::new();
                let clients: BTreeSet<NodeId> = tasks.iter().map(|t| t.client).collect();
                for c in clients {
                    for dir in [ContainerDirection::CodeToHost, ContainerDirection::ResultToClient] {
                        let id = FlowId(flows.len() as u32);
                        flows.push(FlowRt {
                            tf: TrafficFlow::new(id, c, slice, Default::default()),
                            kind: FlowKind::Container,
                            packet_bytes: 0,
                            interval_us: 0,
                            stop_us: 0,
                            sibling: None,
                            local_fraction: 0.0,
                            sent: 0,
                            diverted: 0,
                        });
                        match dir {
                            ContainerDirection::CodeToHost => up.insert(c, id),
                            ContainerDirection::ResultToClient => down_flow.insert(c, id),
                        };
                    }
                }
                Some(OffloadRt {
                    slice,
                    rtt_us: (o.signaling_rtt_ms * 1000.0).round() as SimTime,
                    os_us: (o.os_overhead_ms * 1000.0).round() as SimTime,
                    timeout_us: ms(o.stage_timeout_ms),
                    advert_us: ms(o.advert_period_ms),
                    pdu_size: o.pdu_size,
                    profiles,
                    ledgers,
                    failed_hosts: BTreeSet::new(),
                    down: BTreeSet::new(),
                    adverts: BTreeMap::new(),
                    tasks,
                    sessions: Vec::new(),
                    plans: Vec::new(),
                    mplane: BTreeMap::new(),
                    up,
                    down_flow,
                    pending: BTreeMap::new(),
                    delivered: BTreeMap::new(),
                    remote: BTreeMap::new(),
                    local_end: BTreeMap::new(),
                })
            }
        };

        let mut bursts = Vec::new();
        for b in &sc.rach_bursts {
            bursts.push((node_id(&b.ap)?, b.slice.map(SliceNetId), b.contenders));
        }

        let audit_on = opts.audit.unwrap_or(sc.sim.audit);
        let mut w = World {
            name: sc.name.clone(),
            eng: Engine::new(),
            bus: MetricsBus::new(),
            rng: RngStreams::new(seed),
            t_end: ms(duration_ms),
            audit: AuditStats {
                enabled: audit_on,
                ..Default::default()
            },
            th: sc.ran.thresholds,
            control_cost: sc.ran.control_cost,
            pf_window: sc.sim.pf_window,
            trigger_period: sc.sim.trigger_period_ms.max(1),
            balance_period: sc.sim.balance_period_ms.max(1),
            retry_us: ms(sc.sim.retry_ms.max(1)),
            deactivation_us: ms(sc.sim.deactivation_latency_ms),
            names: sc.nodes.iter().map(|n| n.name.clone()).collect(),
            n_nodes: sc.nodes.len() as u32,
            aps,
            slices,
            members,
            memberships,
            links,
            windows,
            open: BTreeSet::new(),
            flows,
            queues: vec![FunctionQueue::default(); functions.len()],
            functions,
            cn_slices,
            pairing,
            paths: Vec::new(),
            rach_log: Vec::new(),
            common_pending: BTreeMap::new(),
            next_synthetic: sc.nodes.len() as u32,
            bursts,
            off,
        };
        if duration_ms > 0 {
            w.seed_events(sc)?;
        }
        Ok(w)
    }

    fn seed_events(&mut self, sc: &Scenario) -> Result<(), RunError> {
        let at = |w: &mut World, t: SimTime, target: NodeId, ev: Ev| {
            if t <= w.t_end {
                w.eng.schedule(t, target, ev).expect("initial events are never in the past");
            }
        };
        // Slices configured Active from the start.
        let pinned: Vec<(NodeId, SliceNetId)> = self
            .aps
            .iter()
            .flat_map(|(ap, a)| a.slices.iter().filter(|(_, s)| s.pinned).map(move |(s, _)| (*ap, *s)))
            .collect();
        for (ap, s) in pinned {
            let reqs = self.slices[&s].requests.clone();
            let a = self.aps.get_mut(&ap).expect("ap exists");
            let sl = a.slices.get_mut(&s).expect("slice exists");
            slice_on(&mut sl.lc, &mut a.grid, &reqs, 0).map_err(|e| RunError::Build(e.to_string()))?;
            complete_activation(&mut sl.lc, 0).map_err(|e| RunError::Build(e.to_string()))?;
            self.bus.emit(0, Some(s), Some(ap), "slice_state", sl.lc.state.code());
        }
        at(self, 0, NodeId(0), Ev::Tick);
        for (d, ws) in self.windows.clone() {
            for (start, end) in ws {
                at(self, start, d, Ev::WindowOpen(d));
                if end != SimTime::MAX {
                    at(self, end, d, Ev::WindowClose(d));
                }
            }
        }
        for i in 0..sc.flows.len() {
            let f = &self.flows[i];
            let first = ms(sc.flows[i].start_ms) + f.interval_us;
            let dev = f.tf.device;
            if first <= f.stop_us {
                at(self, first, dev, Ev::FlowArrival(FlowId(i as u32)));
            }
        }
        for (i, b) in sc.rach_bursts.iter().enumerate() {
            let ap = self.bursts[i].0;
            at(self, ms(b.at_ms), ap, Ev::RachBurst(i));
        }
        for h in &sc.handovers {
            let d = NodeId(sc.node_index(&h.device).expect("validated") as u32);
            let to = NodeId(sc.node_index(&h.to).expect("validated") as u32);
            at(self, ms(h.at_ms), d, Ev::Handover(d, to));
        }
        for l in &sc.link_failures {
            let n = NodeId(sc.node_index(&l.node).expect("validated") as u32);
            at(self, ms(l.at_ms), n, Ev::LinkFailure(n));
        }
        if let Some(o) = &sc.offload {
            let hosts: Vec<NodeId> = self.off.as_ref().map(|o| o.ledgers.keys().copied().collect()).unwrap_or_default();
            for h in hosts {
                at(self, 0, h, Ev::Advert(h));
            }
            let tasks: Vec<(SimTime, NodeId)> =
                self.off.as_ref().map(|o| o.tasks.iter().map(|t| (t.at, t.client)).collect()).unwrap_or_default();
            for (i, (t, c)) in tasks.into_iter().enumerate() {
                at(self, t, c, Ev::TaskArrival(i));
            }
            for hf in &o.host_failures {
                let h = NodeId(sc.node_index(&hf.host).expect("validated") as u32);
                at(self, ms(hf.at_ms), h, Ev::HostFailure(h));
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<RunOutput, RunError> {
        while let Some(ev) = self.eng.pop_due(self.t_end) {
            self.handle(ev.payload)?;
        }
        self.eng.finish(self.t_end);
        let (sessions, plans) = match self.off {
            Some(o) => (o.sessions, o.plans),
            None => (Vec::new(), Vec::new()),
        };
        Ok(RunOutput {
            scenario: self.name,
            seed: self.rng.master_seed(),
            duration_us: self.t_end,
            events: self.eng.processed(),
            records: self.bus.into_records(),
            names: NodeNames(self.names),
            paths: self.paths,
            rach: self.rach_log,
            sessions,
            plans,
            audit: self.audit,
        })
    }

    fn now(&self) -> SimTime {
        self.eng.now()
    }

    fn emit(&mut self, slice: Option<SliceNetId>, node: Option<NodeId>, metric: &'static str, value: f64) {
        let t = self.eng.now();
        self.bus.emit(t, slice, node, metric, value);
    }

    /// Schedules `ev` after `delay` unless that falls beyond the run.
    fn after(&mut self, delay: SimTime, target: NodeId, ev: Ev) {
        let t = self.now() + delay;
        if t <= self.t_end {
            self.eng.schedule_in(delay, target, ev);
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<(), RunError> {
        match ev {
            Ev::Tick => self.tick()?,
            Ev::FlowArrival(f) => self.flow_arrival(f),
            Ev::WindowOpen(d) => self.window_open(d),
            Ev::WindowClose(d) => self.window_close(d),
            Ev::Access(d, s) => self.access(d, s),
            Ev::ActivationDone(ap, s) => self.activation_done(ap, s)?,
            Ev::DeactivationDone(ap, s) => self.deactivation_done(ap, s)?,
            Ev::Handover(d, to) => self.handover(d, to),
            Ev::CnHop { flow, bytes, hop } => self.cn_hop(flow, bytes, hop)?,
            Ev::RachBurst(i) => self.rach_burst(i),
            Ev::LinkFailure(n) => self.link_failure(n)?,
            Ev::HostFailure(h) => self.host_failure(h)?,
            Ev::Advert(h) => self.advert(h),
            Ev::TaskArrival(k) => self.task_arrival(k)?,
            Ev::RequestAtHost(s) => self.request_at_host(s),
            Ev::ResponseAtClient(s, ok) => self.response_at_client(s, ok)?,
            Ev::SliceDone(s) => self.slice_done(s)?,
            Ev::TransferDone(s, dir) => self.transfer_done(s, dir)?,
            Ev::ExecStart(s) => self.exec_start(s)?,
            Ev::ExecDone(s) => self.exec_done(s)?,
            Ev::ApplyDone(s) => self.apply_done(s)?,
            Ev::LocalTaskDone(k) => self.local_task_done(k),
            Ev::StageTimeout(s, stage) => self.stage_timeout(s, stage)?,
        }
        Ok(())
    }

    // ---- traffic -------------------------------------------------------

    fn flow_arrival(&mut self, id: FlowId) {
        let now = self.now();
        let i = id.0 as usize;
        let (device, interval, stop) = {
            let f = &self.flows[i];
            (f.tf.device, f.interval_us, f.stop_us)
        };
        if now + interval <= stop {
            self.after(interval, device, Ev::FlowArrival(id));
        }
        if !self.open.contains(&device) {
            return;
        }
        let f = &mut self.flows[i];
        let bytes = f.packet_bytes;
        let slice = f.tf.slice;
        f.sent += 1;
        // Deterministic split: the local share tracks round(f * sent).
        let divert = f.sibling.is_some() && (f.diverted as f64) < (f.local_fraction * f.sent as f64).round();
        if divert {
            f.diverted += 1;
            let sib = f.sibling.expect("checked");
            let local_slice = self.flows[sib.0 as usize].tf.slice;
            self.flows[sib.0 as usize].tf.push(bytes, now);
            self.emit(Some(local_slice), Some(device), "arrival_bytes", bytes as f64);
            return;
        }
        self.emit(Some(slice), Some(device), "arrival_bytes", bytes as f64);
        match &self.flows[i].kind {
            FlowKind::Vertical { downlink: true, .. } => {
                self.eng.schedule_in(0, device, Ev::CnHop { flow: id, bytes, hop: 0 });
            }
            _ => {
                self.flows[i].tf.push(bytes, now);
            }
        }
    }

    fn cn_hop(&mut self, flow: FlowId, bytes: u64, hop: usize) -> Result<(), RunError> {
        let now = self.now();
        let (cn, downlink, path) = match &self.flows[flow.0 as usize].kind {
            FlowKind::Vertical { cn, downlink, path } => (*cn, *downlink, path.clone()),
            _ => {
                return Err(invariant(now, "horizontal_locality", format!("flow {flow} reached the core network")));
            }
        };
        if hop == 0 {
            if self.audit.enabled && !self.pairing.is_consistent(&path.radio, path.ran, &path.cn) {
                return Err(invariant(now, "pairing_consistency", format!("flow {flow} path breaks the pairing map")));
            }
            self.paths.push(PathRecord {
                time: now,
                flow,
                radio: path.radio.clone(),
                ran: path.ran,
                cn: path.cn.clone(),
                horizontal: false,
            });
            self.emit(Some(path.ran), None, "cn_ingress_bytes", bytes as f64);
        }
        let chain = &self.cn_slices[cn];
        if hop < chain.chain.len() {
            let f = chain.chain[hop];
            let depart = self.queues[f].admit(&self.functions[f], &chain.id, now);
            let device = self.flows[flow.0 as usize].tf.device;
            self.after(depart - now, device, Ev::CnHop { flow, bytes, hop: hop + 1 });
        } else if downlink {
            self.flows[flow.0 as usize].tf.push(bytes, now);
        }
        Ok(())
    }

    // ---- devices -------------------------------------------------------

    fn window_open(&mut self, d: NodeId) {
        self.open.insert(d);
        for s in self.memberships.get(&d).cloned().unwrap_or_default() {
            if let Some(m) = self.members.get_mut(&(d, s)) {
                if m.state == MemberState::Idle {
                    m.state = MemberState::Waiting;
                }
            }
            self.eng.schedule_in(0, d, Ev::Access(d, s));
        }
    }

    fn window_close(&mut self, d: NodeId) {
        self.open.remove(&d);
        for s in self.memberships.get(&d).cloned().unwrap_or_default() {
            if let Some(m) = self.members.get_mut(&(d, s)) {
                m.state = MemberState::Idle;
                m.target = None;
            }
        }
        for a in self.aps.values_mut() {
            a.common_rach.remove(d);
            for sl in a.slices.values_mut() {
                if let Some(r) = sl.rach.as_mut() {
                    r.remove(d);
                }
            }
        }
        self.common_pending.retain(|(_, dev), _| *dev != d);
        let mut dropped: BTreeMap<SliceNetId, u64> = BTreeMap::new();
        for f in self.flows.iter_mut().filter(|f| f.tf.device == d) {
            let n = f.tf.clear();
            if n > 0 {
                *dropped.entry(f.tf.slice).or_insert(0) += n;
            }
            if let Some(o) = self.off.as_mut() {
                o.pending.remove(&f.tf.id);
            }
        }
        for (s, n) in dropped {
            self.emit(Some(s), Some(d), "dropped_bytes", n as f64);
        }
    }

    fn eligible(&self, ap: NodeId, s: SliceNetId) -> bool {
        let info = &self.slices[&s];
        info.eligible.is_empty() || info.eligible.contains(&self.aps[&ap].class)
    }

    fn state(&self, ap: NodeId, s: SliceNetId) -> LifecycleState {
        self.aps[&ap].slices[&s].lc.state
    }

    fn access(&mut self, d: NodeId, s: SliceNetId) {
        let now = self.now();
        match self.members.get(&(d, s)) {
            Some(m) if m.state == MemberState::Waiting && self.open.contains(&d) => {}
            _ => return,
        }
        let candidates: Vec<Candidate> = self.links[&d]
            .iter()
            .filter(|(ap, _)| self.aps.contains_key(ap))
            .map(|(ap, q)| Candidate {
                ap: *ap,
                link_quality: *q,
                slice_active: self.state(*ap, s) == LifecycleState::Active,
                eligible: self.eligible(*ap, s),
            })
            .collect();
        let Some(ap) = associate(&candidates, self.th.fallback_link) else {
            self.members.get_mut(&(d, s)).expect("member").target = None;
            self.after(self.retry_us, d, Ev::Access(d, s));
            return;
        };
        self.members.get_mut(&(d, s)).expect("member").target = Some(ap);
        let active = self.state(ap, s) == LifecycleState::Active;
        let a = self.aps.get_mut(&ap).expect("ap");
        let slice_rach = a.slices[&s].rach.is_some();
        let enqueued = match route_access(active, slice_rach) {
            AccessRoute::SliceRach => {
                let p = a.slices.get_mut(&s).expect("slice").rach.as_mut().expect("configured");
                if p.is_pending(d) {
                    false
                } else {
                    let first = now / p.config.period_us() + 1;
                    p.enqueue(d, now, first);
                    true
                }
            }
            AccessRoute::CommonRach => {
                if self.common_pending.contains_key(&(ap, d)) {
                    false
                } else {
                    let p = &mut a.common_rach;
                    let first = now / p.config.period_us() + 1;
                    p.enqueue(d, now, first);
                    self.common_pending.insert((ap, d), s);
                    true
                }
            }
        };
        if enqueued {
            self.members.get_mut(&(d, s)).expect("member").state = MemberState::Contending(ap);
        } else {
            self.after(self.retry_us, d, Ev::Access(d, s));
        }
    }

    fn rach_burst(&mut self, i: usize) {
        let now = self.now();
        let (ap, slice, n) = self.bursts[i];
        let a = self.aps.get_mut(&ap).expect("ap");
        let p = match slice {
            Some(s) => a.slices.get_mut(&s).and_then(|x| x.rach.as_mut()).expect("validated slice RACH"),
            None => &mut a.common_rach,
        };
        let first = now / p.config.period_us() + 1;
        for _ in 0..n {
            p.enqueue(NodeId(self.next_synthetic), now, first);
            self.next_synthetic += 1;
        }
    }

    fn run_rach(&mut self, ap: NodeId, sub: u64) {
        let now = self.now();
        let mut outcomes: Vec<RachOutcome> = Vec::new();
        let a = self.aps.get_mut(&ap).expect("ap");
        let mut procs: Vec<&mut RachProcess> = vec![&mut a.common_rach];
        procs.extend(a.slices.values_mut().filter_map(|s| s.rach.as_mut()));
        for p in procs {
            let period = u64::from(p.config.opportunity_period);
            if sub % period != 0 || p.pending() == 0 {
                continue;
            }
            let rng = self.rng.rng_for(StreamKey::slice_at("rach", p.slice, ap));
            outcomes.extend(p.run_opportunity(sub / period, now, rng));
        }
        for o in outcomes {
            self.rach_log.push(RachLog { time: now, ap, outcome: o.clone() });
            let real = o.device.0 < self.n_nodes;
            // Common-channel outcomes are reported against the slice asked for.
            let slice = match o.slice {
                Some(s) => Some(s),
                None if real => self.common_pending.remove(&(ap, o.device)),
                None => None,
            };
            self.emit(slice, Some(o.device), "rach_attempts", f64::from(o.attempts_used));
            if o.success {
                self.emit(slice, Some(o.device), "rach_access_delay_us", o.access_delay_us as f64);
            } else {
                self.emit(slice, Some(o.device), "rach_failed", 1.0);
            }
            let (true, Some(s)) = (real, slice) else { continue };
            if o.success {
                self.on_access(ap, o.device, s);
            } else {
                self.emit(Some(s), Some(o.device), "access_blocked", 0.0);
                self.member_wait(o.device, s);
            }
        }
    }

    fn member_wait(&mut self, d: NodeId, s: SliceNetId) {
        if let Some(m) = self.members.get_mut(&(d, s)) {
            if m.state != MemberState::Idle {
                m.state = MemberState::Waiting;
                self.after(self.retry_us, d, Ev::Access(d, s));
            }
        }
    }

    /// Devices whose association currently points at `ap` for `s`.
    fn devices_at(&self, ap: NodeId, s: SliceNetId, attached_only: bool) -> Vec<NodeId> {
        self.members
            .iter()
            .filter(|((d, sl), m)| {
                *sl == s
                    && self.open.contains(d)
                    && match m.state {
                        MemberState::Attached(a) => a == ap,
                        MemberState::Idle => false,
                        _ => !attached_only && m.target == Some(ap),
                    }
            })
            .map(|((d, _), _)| *d)
            .collect()
    }

    fn offered_load(&self, devices: &[NodeId], s: SliceNetId) -> f64 {
        let set: BTreeSet<NodeId> = devices.iter().copied().collect();
        let offered: f64 = self
            .flows
            .iter()
            .filter(|f| f.tf.slice == s && set.contains(&f.tf.device))
            .map(FlowRt::nominal_bytes)
            .sum();
        let cap = self.slices[&s].nominal_bytes;
        if cap > 0.0 {
            offered / cap
        } else if offered > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }

    fn on_access(&mut self, ap: NodeId, d: NodeId, s: SliceNetId) {
        let attached = self.devices_at(ap, s, true);
        let mut projected = self.devices_at(ap, s, false);
        if !projected.contains(&d) {
            projected.push(d);
        }
        let ctx = AdmissionContext {
            state: self.state(ap, s),
            eligible: self.eligible(ap, s),
            load: self.offered_load(&attached, s),
            projected_devices: projected.len() as u32,
        };
        let dec = admit(d, s, ap, &ctx, &self.th);
        let code = match dec.verdict {
            Verdict::Accept => 0.0,
            Verdict::AcceptWithActivation => 1.0,
            Verdict::Decline => 2.0,
        };
        self.emit(Some(s), Some(d), "admission", code);
        match rach_common_with_activation(&dec) {
            CommonAccessResult::Attach => self.attach(d, s, ap),
            CommonAccessResult::ActivateSlice => {
                if self.try_slice_on(ap, s, ActivationCause::Admission(d)) {
                    self.attach(d, s, ap);
                } else {
                    self.emit(Some(s), Some(d), "access_blocked", crate::ran::Reason::Capacity.code());
                    self.member_wait(d, s);
                }
            }
            CommonAccessResult::Reject => {
                self.emit(Some(s), Some(d), "access_blocked", dec.reason.code());
                self.member_wait(d, s);
            }
        }
    }

    fn attach(&mut self, d: NodeId, s: SliceNetId, ap: NodeId) {
        if let Some(m) = self.members.get_mut(&(d, s)) {
            m.state = MemberState::Attached(ap);
            m.target = Some(ap);
        }
    }

    fn handover(&mut self, d: NodeId, to: NodeId) {
        for s in self.memberships.get(&d).cloned().unwrap_or_default() {
            let Some(m) = self.members.get_mut(&(d, s)) else { continue };
            let MemberState::Attached(from) = m.state else { continue };
            if from == to {
                continue;
            }
            m.state = MemberState::Attached(to);
            m.target = Some(to);
            let sl = self.aps.get_mut(&to).expect("ap").slices.get_mut(&s).expect("slice");
            if sl.lc.state != LifecycleState::Active {
                sl.handovers_in += 1;
            }
            self.emit(Some(s), Some(d), "handover", f64::from(to.0));
        }
    }

    // ---- lifecycle -----------------------------------------------------

    fn try_slice_on(&mut self, ap: NodeId, s: SliceNetId, cause: ActivationCause) -> bool {
        let now = self.now();
        let reqs = self.slices[&s].requests.clone();
        let a = self.aps.get_mut(&ap).expect("ap");
        let sl = a.slices.get_mut(&s).expect("slice");
        match slice_on(&mut sl.lc, &mut a.grid, &reqs, now) {
            Ok(active_at) => {
                self.emit(Some(s), Some(ap), "slice_on_cause", cause.code());
                self.emit(Some(s), Some(ap), "slice_state", LifecycleState::Activating.code());
                self.after(active_at - now, ap, Ev::ActivationDone(ap, s));
                true
            }
            Err(_) => {
                self.emit(Some(s), Some(ap), "slice_on_failed", crate::ran::Reason::Capacity.code());
                false
            }
        }
    }

    fn check_grid(&self, ap: NodeId) -> Result<(), RunError> {
        if self.audit.enabled && !self.aps[&ap].grid.check_conservation() {
            return Err(invariant(self.now(), "grid_conservation", format!("cell count mismatch at {}", self.names[ap.0 as usize])));
        }
        Ok(())
    }

    fn activation_done(&mut self, ap: NodeId, s: SliceNetId) -> Result<(), RunError> {
        let now = self.now();
        let sl = self.aps.get_mut(&ap).expect("ap").slices.get_mut(&s).expect("slice");
        complete_activation(&mut sl.lc, now).map_err(|e| invariant(now, "lifecycle_order", e.to_string()))?;
        sl.off.reset();
        self.emit(Some(s), Some(ap), "slice_state", LifecycleState::Active.code());
        self.check_grid(ap)?;
        // Devices waiting on this AP try again right away.
        let waiting: Vec<NodeId> = self
            .members
            .iter()
            .filter(|((_, sl), m)| *sl == s && m.state == MemberState::Waiting && m.target == Some(ap))
            .map(|((d, _), _)| *d)
            .collect();
        for d in waiting {
            self.eng.schedule_in(0, d, Ev::Access(d, s));
        }
        Ok(())
    }

    fn deactivation_done(&mut self, ap: NodeId, s: SliceNetId) -> Result<(), RunError> {
        let now = self.now();
        let sl = self.aps.get_mut(&ap).expect("ap").slices.get_mut(&s).expect("slice");
        complete_deactivation(&mut sl.lc, now).map_err(|e| invariant(now, "lifecycle_order", e.to_string()))?;
        sl.l1 = L1State::default();
        self.emit(Some(s), Some(ap), "slice_state", LifecycleState::Inactive.code());
        Ok(())
    }

    fn evaluate(&mut self, ap: NodeId) -> Result<(), RunError> {
        let now = self.now();
        let period_bytes_scale = self.trigger_period as f64;
        let slices: Vec<SliceNetId> = self.aps[&ap].slices.keys().copied().collect();
        for s in slices {
            let (state, pinned, served, handovers) = {
                let sl = &self.aps[&ap].slices[&s];
                (sl.lc.state, sl.pinned, sl.served_since_eval, sl.handovers_in)
            };
            match state {
                LifecycleState::Inactive if self.eligible(ap, s) => {
                    let devices = self.devices_at(ap, s, false);
                    let set: BTreeSet<NodeId> = devices.iter().copied().collect();
                    let worst = self
                        .flows
                        .iter()
                        .filter(|f| f.tf.slice == s && set.contains(&f.tf.device))
                        .map(|f| f.tf.head_delay(now) as f64 / (f.tf.qos.latency_budget_ms * 1000.0).max(1.0))
                        .fold(0.0, f64::max);
                    let obs = Observations {
                        offered_load: self.offered_load(&devices, s),
                        active_devices: devices.len() as u32,
                        incoming_handovers: handovers,
                        worst_delay_ratio: worst,
                    };
                    let fired = evaluate_on_triggers(&obs, &self.th);
                    self.aps.get_mut(&ap).expect("ap").slices.get_mut(&s).expect("slice").handovers_in = 0;
                    if !fired.is_empty() {
                        self.emit(Some(s), Some(ap), "trigger_fired", f64::from(fired.bits()));
                        self.try_slice_on(ap, s, ActivationCause::Triggers(fired));
                        self.check_grid(ap)?;
                    }
                }
                LifecycleState::Active if !pinned => {
                    let devices = self.devices_at(ap, s, true).len() as u32;
                    let cap = self.slices[&s].nominal_bytes * period_bytes_scale;
                    let load = if cap > 0.0 { served as f64 / cap } else { 0.0 };
                    let th = self.th;
                    let a = self.aps.get_mut(&ap).expect("ap");
                    let sl = a.slices.get_mut(&s).expect("slice");
                    if sl.off.observe(now, load, devices, &th) {
                        slice_off(&mut sl.lc, &mut a.grid, now).map_err(|e| invariant(now, "lifecycle_order", e.to_string()))?;
                        sl.off.reset();
                        self.emit(Some(s), Some(ap), "slice_state", LifecycleState::Deactivating.code());
                        self.after(self.deactivation_us, ap, Ev::DeactivationDone(ap, s));
                        self.check_grid(ap)?;
                    }
                }
                _ => {}
            }
            self.aps.get_mut(&ap).expect("ap").slices.get_mut(&s).expect("slice").served_since_eval = 0;
        }
        Ok(())
    }

    fn emit_cp_overhead(&mut self, ap: NodeId) {
        let a = &self.aps[&ap];
        let active: Vec<&CuPlaneConfig> = a
            .slices
            .iter()
            .filter(|(_, sl)| sl.lc.state == LifecycleState::Active)
            .map(|(s, _)| &self.slices[s].cu)
            .collect();
        let v = if active.is_empty() { 0.0 } else { control_plane_overhead(active, self.control_cost) };
        if a.last_cp != Some(v) {
            self.aps.get_mut(&ap).expect("ap").last_cp = Some(v);
            self.emit(None, Some(ap), "cp_overhead", v);
        }
    }

    fn balance(&mut self) {
        let slices: Vec<SliceNetId> = self.slices.keys().copied().collect();
        for s in slices {
            let aps: Vec<ApSliceLoad> = self
                .aps
                .keys()
                .map(|ap| {
                    let attached = self.devices_at(*ap, s, true);
                    ApSliceLoad {
                        ap: *ap,
                        load: self.offered_load(&attached, s),
                        active: self.state(*ap, s) == LifecycleState::Active,
                    }
                })
                .collect();
            let devices: Vec<AttachedDevice> = self
                .members
                .iter()
                .filter(|((d, sl), _)| *sl == s && self.open.contains(d))
                .filter_map(|((d, _), m)| match m.state {
                    MemberState::Attached(ap) => Some(AttachedDevice {
                        device: *d,
                        ap,
                        links: self.links[d]
                            .iter()
                            .filter(|(a, _)| self.aps.contains_key(a) && self.eligible(**a, s))
                            .map(|(a, q)| (*a, *q))
                            .collect(),
                    }),
                    _ => None,
                })
                .collect();
            for r in load_balance(s, &aps, &devices, &self.th) {
                self.attach(r.device, r.slice, r.to);
                self.emit(Some(r.slice), Some(r.device), "lb_move", f64::from(r.to.0));
            }
        }
    }

    // ---- radio tick ----------------------------------------------------

    fn tick(&mut self) -> Result<(), RunError> {
        let now = self.now();
        let sub = now / SUBFRAME_US;
        let aps: Vec<NodeId> = self.aps.keys().copied().collect();
        for ap in aps {
            self.run_rach(ap, sub);
            if sub % self.trigger_period == 0 {
                self.evaluate(ap)?;
            }
            self.emit_cp_overhead(ap);
            self.mac(ap, sub)?;
        }
        if sub > 0 && sub % self.balance_period == 0 {
            self.balance();
        }
        if now + SUBFRAME_US < self.t_end {
            self.eng.schedule_in(SUBFRAME_US, NodeId(0), Ev::Tick);
        }
        Ok(())
    }

    fn mac(&mut self, ap: NodeId, sub: u64) -> Result<(), RunError> {
        let now = self.now();
        let completion = now + SUBFRAME_US;
        let phase = (sub % u64::from(self.aps[&ap].grid.period())) as u32;

        // Flows of attached devices, per Active slice, in id order.
        let mut per_slice: BTreeMap<SliceNetId, Vec<usize>> = BTreeMap::new();
        for (i, f) in self.flows.iter().enumerate() {
            let key = (f.tf.device, f.tf.slice);
            let attached = matches!(self.members.get(&key), Some(m) if m.state == MemberState::Attached(ap));
            if attached && self.open.contains(&f.tf.device) && self.state(ap, f.tf.slice) == LifecycleState::Active {
                per_slice.entry(f.tf.slice).or_default().push(i);
            }
        }
        if per_slice.is_empty() {
            return Ok(());
        }

        let a = self.aps.get(&ap).expect("ap");
        let pool = a.grid.pool_cells(phase);
        let mut demands = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for (s, idx) in &per_slice {
            let backlog: u64 = idx.iter().map(|i| self.flows[*i].tf.backlog()).sum();
            let info = &self.slices[s];
            let own = a.grid.subset(*s).map(|x| x.cells_in_phase(phase)).unwrap_or(&[]);
            let pool_cells: &[Cell] = if info.pool_weight.is_some() { pool } else { &[] };
            demands.insert(*s, demand_cells(backlog, own, pool_cells, &a.cap));
            if let Some(w) = info.pool_weight {
                weights.insert(*s, w);
            }
        }
        let l2 = l2_allocate(sub, &demands, &weights, &a.grid).map_err(|e| invariant(now, "mac_containment", e.to_string()))?;
        let dci = emit_common_dci(&l2);

        if self.audit.enabled {
            let mut seen: BTreeSet<Cell> = BTreeSet::new();
            let pool_set: BTreeSet<&Cell> = pool.iter().collect();
            for e in &dci.entries {
                let subset = a.grid.subset(e.slice);
                for c in &e.cells {
                    let inside = subset.map_or(false, |x| x.contains(c)) || pool_set.contains(c);
                    if !inside || !a.grid.contains(c) || c.phase != phase {
                        return Err(invariant(now, "mac_containment", format!("grant cell {c} of slice {} outside its subset", e.slice)));
                    }
                    if !seen.insert(*c) {
                        return Err(invariant(now, "grant_disjointness", format!("cell {c} granted twice")));
                    }
                }
                if a.slices[&e.slice].lc.state != LifecycleState::Active {
                    return Err(invariant(now, "served_only_active", format!("slice {} granted while not Active", e.slice)));
                }
            }
            self.audit.cells_checked += seen.len() as u64;
            self.audit.subframes_checked += 1;
        }

        let pool_len = pool.len();
        let mut metrics: Vec<(SliceNetId, &'static str, f64)> = Vec::new();
        let mut node_metrics: Vec<(&'static str, f64)> = Vec::new();
        if !l2.pool.is_empty() {
            node_metrics.push(("pool_cells", pool_len as f64));
        }
        let mut completed = Vec::new();
        let cap = self.aps[&ap].cap.clone();
        for (s, idx) in &per_slice {
            let demand = demands[s];
            let grant: Vec<Cell> = l2.granted(*s).to_vec();
            let info = &self.slices[s];
            let (policy, pf) = (info.policy, self.pf_window);
            let idx_set: BTreeSet<usize> = idx.iter().copied().collect();
            let flow_refs: Vec<&TrafficFlow> = idx.iter().map(|i| &self.flows[*i].tf).collect();
            let sl = self.aps.get_mut(&ap).expect("ap").slices.get_mut(s).expect("slice");
            let sched = l1_schedule(*s, sub, &grant, &flow_refs, policy, &mut sl.l1, &cap, pf);
            if self.audit.enabled {
                let grant_set: BTreeSet<&Cell> = grant.iter().collect();
                let dci = SliceDci::from_schedule(&sched);
                if let Some(c) = dci.first_outside(|c| grant_set.contains(c)) {
                    return Err(invariant(now, "mac_containment", format!("assignment {c} of slice {s} outside its grant")));
                }
                let mut seen = BTreeSet::new();
                for c in sched.assignments.values().flatten() {
                    if !seen.insert(*c) {
                        return Err(invariant(now, "mac_containment", format!("cell {c} assigned twice in slice {s}")));
                    }
                }
            }
            let mut refs: Vec<&mut TrafficFlow> = self
                .flows
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| idx_set.contains(i))
                .map(|(_, f)| &mut f.tf)
                .collect();
            let out = serve(&sched, &mut refs, &cap, completion);
            update_averages(&mut refs, &out.served, pf);
            let served = out.total_bytes();
            sl_served(&mut self.aps, ap, *s, served);

            if demand > 0 {
                metrics.push((*s, "l2_demand_cells", f64::from(demand)));
                metrics.push((*s, "l2_grant_cells", grant.len() as f64));
                metrics.push((*s, "idle_cells", sched.idle.len() as f64));
            }
            if let Some((d, g)) = l2.pool.get(s) {
                metrics.push((*s, "pool_demand_cells", f64::from(*d)));
                metrics.push((*s, "pool_grant_cells", f64::from(*g)));
            }
            if served > 0 {
                metrics.push((*s, "served_bytes", served as f64));
            }
            if !out.completed.is_empty() {
                let n = out.completed.len() as f64;
                let mean = out.completed.iter().map(|c| c.latency_us as f64).sum::<f64>() / n;
                metrics.push((*s, "packets_completed", n));
                metrics.push((*s, "packet_latency_us", mean));
            }
            completed.extend(out.completed);
        }
        for (m, v) in node_metrics {
            self.emit(None, Some(ap), m, v);
        }
        for (s, m, v) in metrics {
            self.emit(Some(s), Some(ap), m, v);
        }

        for c in completed {
            let i = c.flow.0 as usize;
            let device = self.flows[i].tf.device;
            match &self.flows[i].kind {
                FlowKind::Vertical { downlink: false, .. } => {
                    self.after(SUBFRAME_US, device, Ev::CnHop { flow: c.flow, bytes: c.bytes, hop: 0 });
                }
                FlowKind::Container => {
                    let done = self.off.as_mut().and_then(|o| {
                        let q = o.pending.get_mut(&c.flow)?;
                        if q.front().map(|p| p.last_packet) != Some(c.packet) {
                            return None;
                        }
                        let p = q.pop_front()?;
                        o.delivered.insert((p.session, p.dir), p.container);
                        Some((p.session, p.dir))
                    });
                    if let Some((sid, dir)) = done {
                        self.after(SUBFRAME_US, device, Ev::TransferDone(sid, dir));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    // ---- offload -------------------------------------------------------

    fn off(&mut self) -> &mut OffloadRt {
        self.off.as_mut().expect("offload configured")
    }

    fn advert(&mut self, host: NodeId) {
        let o = self.off();
        let failed = o.failed_hosts.contains(&host);
        let shareable = if failed { 0.0 } else { o.ledgers[&host].remaining() };
        let rtt = o.rtt_us;
        let slice = o.slice;
        let period = o.advert_us;
        o.adverts.insert(
            host,
            HostAdvertisement {
                host,
                shareable,
                signaling_rtt_us: rtt,
            },
        );
        self.emit(Some(slice), Some(host), "host_shareable", shareable);
        if period > 0 {
            self.after(period, host, Ev::Advert(host));
        }
    }

    /// Nominal rate of the horizontal slice, bits per second.
    fn link_rate_bps(&self) -> f64 {
        let s = self.off.as_ref().expect("offload").slice;
        self.slices[&s].nominal_bytes * 8.0 * 1000.0
    }

    fn task_arrival(&mut self, k: usize) -> Result<(), RunError> {
        let now = self.now();
        let rate = self.link_rate_bps();
        let o = self.off();
        let t = &o.tasks[k];
        let (client, host, task, asked) = (t.client, t.host, t.task.clone(), t.asked);
        let profile = o.profiles[&client];
        let slice = o.slice;
        let adv = o.adverts.get(&host).copied().unwrap_or(HostAdvertisement {
            host,
            shareable: 0.0,
            signaling_rtt_us: o.rtt_us,
        });
        let os_s = o.os_us as f64 / 1e6;
        let plan = decide_offload(&task, &profile, &adv, rate, asked.unwrap_or(adv.shareable), os_s);
        let local_us = (plan.estimate.local * 1e6).round() as SimTime;
        self.emit(
            Some(slice),
            Some(client),
            "offload_decision",
            if plan.decision == OffloadDecision::RequestOffload { 1.0 } else { 0.0 },
        );
        if plan.estimate.offload.is_finite() {
            self.emit(Some(slice), Some(client), "offload_estimate_us", plan.estimate.offload * 1e6);
        }
        if plan.capacity_shortfall {
            self.emit(Some(slice), Some(client), "offload_shortfall", 1.0);
        }
        if plan.decision == OffloadDecision::Local {
            self.off().plans.push((task.id, plan, None));
            self.after(local_us, client, Ev::LocalTaskDone(k));
            return Ok(());
        }

        let o = self.off();
        let sid = SessionId(o.sessions.len() as u32);
        let mut session = OffloadSession::new(sid, client, host, slice, task.clone(), now);
        let link_up = !o.down.contains(&client) && !o.down.contains(&host);
        let res = o.mplane.entry(client).or_default().mplane_request(&mut session, now, link_up);
        o.sessions.push(session);
        o.plans.push((task.id, plan, Some(sid)));
        match res {
            Ok(()) => {
                self.session_changed(sid)?;
                let half = self.off().rtt_us / 2;
                self.after(half, host, Ev::RequestAtHost(sid));
            }
            Err(OffloadError::LinkDown(..)) => {
                self.emit(Some(slice), Some(client), "offload_state", SessionState::Requested.code());
                self.emit(Some(slice), Some(client), "offload_state", SessionState::Failed.code());
                self.emit(Some(slice), Some(client), "offload_failed", FailureReason::LinkLoss.code());
            }
            Err(_) => {
                self.after(local_us, client, Ev::LocalTaskDone(k));
            }
        }
        Ok(())
    }

    /// Metrics, conformance check and stage timeout after a transition.
    fn session_changed(&mut self, sid: SessionId) -> Result<(), RunError> {
        let now = self.now();
        let audit = self.audit.enabled;
        let o = self.off();
        let s = &o.sessions[sid.0 as usize];
        let (slice, client, state, stage, timeout) = (s.slice, s.client, s.state, s.history.len(), o.timeout_us);
        if audit && !conforms(&s.states()) {
            return Err(invariant(now, "session_order", format!("session {sid}: {:?}", s.states())));
        }
        if audit {
            for l in o.ledgers.values() {
                if l.granted_total() > l.profile.shareable() + 1e-9 {
                    return Err(invariant(now, "host_capacity", format!("host {} over-granted", l.profile.node)));
                }
            }
        }
        self.emit(Some(slice), Some(client), "offload_state", state.code());
        if !state.is_terminal() {
            self.after(timeout, client, Ev::StageTimeout(sid, stage));
        }
        Ok(())
    }

    fn advance(&mut self, sid: SessionId, to: SessionState) -> Result<bool, RunError> {
        let now = self.now();
        let s = &mut self.off().sessions[sid.0 as usize];
        if s.state.is_terminal() {
            return Ok(false);
        }
        s.advance(to, now).map_err(|e| invariant(now, "session_order", e.to_string()))?;
        self.session_changed(sid)?;
        Ok(true)
    }

    fn fail(&mut self, sid: SessionId, reason: FailureReason) -> Result<(), RunError> {
        let now = self.now();
        let o = self.off();
        let s = &mut o.sessions[sid.0 as usize];
        if s.state.is_terminal() {
            return Ok(());
        }
        s.fail(reason, now).map_err(|e| invariant(now, "session_order", e.to_string()))?;
        let (host, slice, client) = (s.host, s.slice, s.client);
        if let Some(l) = o.ledgers.get_mut(&host) {
            l.refund(sid);
        }
        self.session_changed(sid)?;
        self.emit(Some(slice), Some(client), "offload_failed", reason.code());
        Ok(())
    }

    fn request_at_host(&mut self, sid: SessionId) {
        let o = self.off();
        let s = &o.sessions[sid.0 as usize];
        if s.state.is_terminal() || o.failed_hosts.contains(&s.host) {
            return;
        }
        let (host, client) = (s.host, s.client);
        let plan_asked = o
            .plans
            .iter()
            .find(|(_, _, x)| *x == Some(sid))
            .map(|(_, p, _)| p.granted_estimate)
            .unwrap_or(0.0);
        let verdict = o.ledgers.get_mut(&host).map_or(HostVerdict::Decline, |l| l.host_admit(sid, plan_asked));
        let ok = match verdict {
            HostVerdict::Grant(g) => {
                o.sessions[sid.0 as usize].granted = g;
                true
            }
            HostVerdict::Decline => false,
        };
        let back = o.rtt_us - o.rtt_us / 2;
        self.after(back, client, Ev::ResponseAtClient(sid, ok));
    }

    fn response_at_client(&mut self, sid: SessionId, accepted: bool) -> Result<(), RunError> {
        if !accepted {
            self.advance(sid, SessionState::Declined)?;
            return Ok(());
        }
        if !self.advance(sid, SessionState::Accepted)? {
            let o = self.off();
            let host = o.sessions[sid.0 as usize].host;
            if let Some(l) = o.ledgers.get_mut(&host) {
                l.refund(sid);
            }
            return Ok(());
        }
        let os = self.off().os_us;
        let client = self.off().sessions[sid.0 as usize].client;
        self.after(os, client, Ev::SliceDone(sid));
        Ok(())
    }

    fn send_container(&mut self, sid: SessionId, payload: Payload) -> Result<(), RunError> {
        let now = self.now();
        let o = self.off();
        let s = &o.sessions[sid.0 as usize];
        let client = s.client;
        let container = pack_container(sid, &payload);
        let dir = container.direction;
        let flow = match dir {
            ContainerDirection::CodeToHost => o.up[&client],
            ContainerDirection::ResultToClient => o.down_flow[&client],
        };
        let n = pdu_count(container.payload_bytes, o.pdu_size);
        if n == 0 {
            o.delivered.insert((sid, dir), container);
            self.eng.schedule_in(0, client, Ev::TransferDone(sid, dir));
            return Ok(());
        }
        let pdu = o.pdu_size;
        let total = container.payload_bytes;
        let mut last = 0;
        for k in 0..n {
            let size = (total - k * pdu).min(pdu);
            last = self.flows[flow.0 as usize].tf.push(size, now);
        }
        self.off().pending.entry(flow).or_default().push_back(Pending {
            last_packet: last,
            session: sid,
            dir,
            container,
        });
        Ok(())
    }

    fn slice_done(&mut self, sid: SessionId) -> Result<(), RunError> {
        let now = self.now();
        if !self.advance(sid, SessionState::Sliced)? {
            return Ok(());
        }
        let o = self.off();
        let s = &o.sessions[sid.0 as usize];
        let (local, remote) = slice_task(sid, &s.task);
        let cap = o.profiles[&s.client].total_capacity;
        let local_us = if local.ops > 0.0 { (local.ops / cap * 1e6).ceil() as SimTime } else { 0 };
        o.local_end.insert(sid, now + local_us);
        o.remote.insert(sid, remote.clone());
        self.send_container(sid, Payload::Code(remote))
    }

    fn take_container(&mut self, sid: SessionId, dir: ContainerDirection) -> Option<crate::offload::Container> {
        self.off().delivered.remove(&(sid, dir))
    }

    fn transfer_done(&mut self, sid: SessionId, dir: ContainerDirection) -> Result<(), RunError> {
        if self.off().sessions[sid.0 as usize].state.is_terminal() {
            return Ok(());
        }
        let container = self.take_container(sid, dir);
        let payload = match container.map(|c| unpack_container(&c)) {
            Some(Ok(p)) => p,
            Some(Err(_)) | None => return self.fail(sid, FailureReason::DigestMismatch),
        };
        let client = self.off().sessions[sid.0 as usize].client;
        let os = self.off().os_us;
        match (dir, payload) {
            (ContainerDirection::CodeToHost, Payload::Code(_)) => {
                if self.advance(sid, SessionState::Shipped)? {
                    self.after(os, client, Ev::ExecStart(sid));
                }
            }
            (ContainerDirection::ResultToClient, Payload::Result(_)) => {
                if self.advance(sid, SessionState::Returned)? {
                    let now = self.now();
                    let local_end = self.off().local_end.get(&sid).copied().unwrap_or(now);
                    let at = local_end.max(now) + os;
                    self.after(at - now, client, Ev::ApplyDone(sid));
                }
            }
            _ => return self.fail(sid, FailureReason::DigestMismatch),
        }
        Ok(())
    }

    fn exec_start(&mut self, sid: SessionId) -> Result<(), RunError> {
        if !self.advance(sid, SessionState::Executing)? {
            return Ok(());
        }
        let o = self.off();
        let s = &o.sessions[sid.0 as usize];
        let ops = o.remote.get(&sid).map_or(0.0, |r| r.ops);
        let dur = execution_time_us(ops, s.granted.max(1e-9));
        let host = s.host;
        self.after(dur, host, Ev::ExecDone(sid));
        Ok(())
    }

    fn exec_done(&mut self, sid: SessionId) -> Result<(), RunError> {
        let o = self.off();
        let s = &o.sessions[sid.0 as usize];
        if s.state != SessionState::Executing {
            return Ok(());
        }
        let result = ExecResult {
            session: sid,
            task: s.task.id,
            result_bytes: s.task.result_bytes,
        };
        self.send_container(sid, Payload::Result(result))
    }

    fn apply_done(&mut self, sid: SessionId) -> Result<(), RunError> {
        if !self.advance(sid, SessionState::Applied)? {
            return Ok(());
        }
        let o = self.off();
        let s = &o.sessions[sid.0 as usize];
        let (slice, client, host) = (s.slice, s.client, s.host);
        let latency = s.total_latency().unwrap_or(0);
        let baseline = s.task.total_ops / o.profiles[&client].total_capacity * 1e6;
        if let Some(l) = o.ledgers.get_mut(&host) {
            l.refund(sid);
        }
        self.emit(Some(slice), Some(client), "offload_latency_us", latency as f64);
        self.emit(Some(slice), Some(client), "offload_local_baseline_us", baseline);
        Ok(())
    }

    fn local_task_done(&mut self, k: usize) {
        let o = self.off();
        let t = &o.tasks[k];
        let (slice, client) = (o.slice, t.client);
        let v = t.task.total_ops / o.profiles[&client].total_capacity * 1e6;
        self.emit(Some(slice), Some(client), "local_task_latency_us", v);
    }

    fn stage_timeout(&mut self, sid: SessionId, stage: usize) -> Result<(), RunError> {
        let s = &self.off().sessions[sid.0 as usize];
        if !s.state.is_terminal() && s.history.len() == stage {
            self.fail(sid, FailureReason::Timeout)?;
        }
        Ok(())
    }

    fn host_failure(&mut self, host: NodeId) -> Result<(), RunError> {
        let Some(o) = self.off.as_mut() else { return Ok(()) };
        o.failed_hosts.insert(host);
        let hit: Vec<SessionId> = o
            .sessions
            .iter()
            .filter(|s| s.host == host && !s.state.is_terminal())
            .map(|s| s.id)
            .collect();
        for sid in hit {
            self.fail(sid, FailureReason::HostFailure)?;
        }
        Ok(())
    }

    fn link_failure(&mut self, node: NodeId) -> Result<(), RunError> {
        let Some(o) = self.off.as_mut() else { return Ok(()) };
        o.down.insert(node);
        let hit: Vec<SessionId> = o
            .sessions
            .iter()
            .filter(|s| (s.client == node || s.host == node) && !s.state.is_terminal())
            .map(|s| s.id)
            .collect();
        for sid in hit {
            self.fail(sid, FailureReason::LinkLoss)?;
        }
        Ok(())
    }
}

fn sl_served(aps: &mut BTreeMap<NodeId, Ap>, ap: NodeId, s: SliceNetId, bytes: u64) {
    if let Some(sl) = aps.get_mut(&ap).and_then(|a| a.slices.get_mut(&s)) {
        sl.served_since_eval += bytes;
    }
}

/// Cells needed to clear `backlog`, taking own cells first and then the pool.
fn demand_cells(backlog: u64, own: &[Cell], pool: &[Cell], cap: &CellCapacity) -> u32 {
    if backlog == 0 {
        return 0;
    }
    let mut acc = 0;
    let mut n = 0u32;
    let mut last = 0;
    for c in own.iter().chain(pool) {
        if acc >= backlog {
            return n;
        }
        last = cap.bytes(c);
        acc += last;
        n += 1;
    }
    if acc >= backlog {
        return n;
    }
    let per = if last > 0 { last } else { 1 };
    n + ((backlog - acc).div_ceil(per)) as u32
}
