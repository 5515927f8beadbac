use std::path::PathBuf;

use slicesim::ids::SliceNetId;
use slicesim::offload::{FailureReason, SessionState};
use slicesim::report::summarize;
use slicesim::scenario::{parse_value, ScenarioSource};
use slicesim::world::{run, RunOptions, RunOutput};

fn bundled(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    std::fs::read_to_string(p).unwrap()
}

fn go(text: &str, opts: RunOptions) -> RunOutput {
    let sc = ScenarioSource::parse(text).unwrap().scenario().unwrap();
    run(&sc, opts).unwrap()
}

fn count(out: &RunOutput, metric: &str) -> usize {
    out.records.iter().filter(|r| r.metric == metric).count()
}

const ONE_FLOW: &str = r#"
name = "one_flow"
duration_ms = 10

[grid]
total_blocks = 10
[[grid.segments]]
name = "main"
blocks = [0, 10]

[[slices]]
id = 1
name = "mbb"
active_at = ["ap"]
resources = [{ segment = "main", blocks = 10 }]

[[nodes]]
name = "ap"
kind = "ap"

[[nodes]]
name = "ue"
kind = "device"
slices = [1]
links = { ap = -70.0 }

[[flows]]
device = "ue"
slice = 1
service = "mbb"
direction = "DIRECTION"
packet_bytes = 100
interval_ms = 1.0

[[cn.functions]]
name = "gw"
rate_per_ms = 100.0
latency_us = 100

[[cn.slices]]
id = "core"
chain = ["gw"]
service = "mbb"

[pairing]
radio_to_ran = { main = [1] }
ran_to_cn = { "1" = ["core"] }
"#;

#[test]
fn periodic_source_ten_arrivals() {
    let out = go(&ONE_FLOW.replace("DIRECTION", "uplink"), RunOptions::default());
    assert_eq!(count(&out, "arrival_bytes"), 10);
}

#[test]
fn downlink_enters_core_before_air() {
    let text = ONE_FLOW.replace("DIRECTION", "downlink").replace("duration_ms = 10", "duration_ms = 100");
    let out = go(&text, RunOptions::default());
    assert_eq!(out.paths.len(), 100);
    let served: f64 = out.records.iter().filter(|r| r.metric == "served_bytes").map(|r| r.value).sum();
    assert!(served > 0.0);
    let first_served = out.records.iter().find(|r| r.metric == "served_bytes").unwrap().time;
    assert!(out.paths[0].time < first_served);
}

#[test]
fn zero_duration_is_empty() {
    let out = go(&bundled("two_level_mac"), RunOptions { duration_ms: Some(0), ..Default::default() });
    assert!(out.records.is_empty());
    let s = summarize(&out.records, out.duration_us);
    assert!(s.slices.is_empty());
    assert_eq!(s.core_edge_ratio, None);
}

#[test]
fn seed_moves_rach_not_grid() {
    let text = bundled("isolation_rach");
    let a = go(&text, RunOptions { seed: Some(1), ..Default::default() });
    let b = go(&text, RunOptions { seed: Some(2), ..Default::default() });
    assert_ne!(a.rach, b.rach);
    let sc = ScenarioSource::parse(&text).unwrap().scenario().unwrap();
    let grid = sc.build_grid().unwrap();
    for s in &sc.slices {
        let r1 = sc.carve_requests(s, &grid).unwrap();
        let r2 = sc.carve_requests(s, &grid).unwrap();
        assert_eq!(r1, r2);
    }
    let states = |o: &RunOutput| o.records.iter().filter(|r| r.metric == "slice_state").cloned().collect::<Vec<_>>();
    assert_eq!(states(&a), states(&b));
}

fn offload_with(extra: &str) -> RunOutput {
    go(&format!("{}\n{extra}", bundled("offload_wearable")), RunOptions::default())
}

#[test]
fn host_failure_fails_session() {
    let out = offload_with("[[offload.host_failures]]\nhost = \"phone\"\nat_ms = 300\n");
    let s = &out.sessions[0];
    assert_eq!(s.state, SessionState::Failed);
    assert_eq!(s.failure, Some(FailureReason::HostFailure));
    let shareable: Vec<f64> = out.records.iter().filter(|r| r.metric == "host_shareable").map(|r| r.value).collect();
    assert_eq!(*shareable.last().unwrap(), 0.0);
    let failed = out.records.iter().find(|r| r.metric == "offload_failed").unwrap();
    assert_eq!(failed.value, FailureReason::HostFailure.code());
    assert_eq!(failed.time, 300_000);
}

#[test]
fn link_failure_fails_session() {
    let out = offload_with("[[link_failures]]\nnode = \"watch\"\nat_ms = 500\n");
    assert_eq!(out.sessions[0].failure, Some(FailureReason::LinkLoss));
}

#[test]
fn slow_stage_times_out() {
    let text = bundled("offload_wearable").replace("stage_timeout_ms = 20000", "stage_timeout_ms = 200");
    let out = go(&text, RunOptions::default());
    let s = &out.sessions[0];
    assert_eq!(s.failure, Some(FailureReason::Timeout));
    // Shipping 10 MiB takes about 840 ms, so the timeout hits while Sliced.
    assert_eq!(s.states()[s.states().len() - 2], SessionState::Sliced);
}

#[test]
fn concurrent_sessions_share_host() {
    let src = ScenarioSource::parse(&bundled("offload_wearable")).unwrap();
    let src = src
        .with_param("offload.tasks[0].count", &parse_value("2"))
        .unwrap()
        .with_param("offload.tasks[0].every_ms", &parse_value("1"))
        .unwrap()
        .with_param("offload.tasks[0].asked", &parse_value("800.0"))
        .unwrap();
    let out = run(&src.scenario().unwrap(), RunOptions::default()).unwrap();
    let granted: Vec<f64> = out.sessions.iter().map(|s| s.granted).collect();
    assert_eq!(granted, vec![800.0, 200.0]);
    assert!(out.sessions.iter().all(|s| s.state == SessionState::Applied));
}

#[test]
fn handover_into_idle_slice_activates_it() {
    let out = go(&bundled("slice_onoff"), RunOptions::default());
    let macro_ap = slicesim::ids::NodeId(0);
    let cause = out
        .records
        .iter()
        .find(|r| r.metric == "slice_on_cause" && r.node == Some(macro_ap) && r.slice == Some(SliceNetId(2)))
        .unwrap();
    // Service-continuity trigger bit.
    assert_eq!(cause.value, 4.0);
    assert_eq!(cause.time, 1_500_000);
}
