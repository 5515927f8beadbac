use proptest::prelude::*;
use slicesim::ids::{NodeId, SessionId};
use slicesim::offload::{
    decide_offload, pdu_count, ComputeProfile, HostAdvertisement, HostLedger, HostVerdict, OffloadDecision, SliceableTask,
};

fn task(ship: u64, result: u64) -> SliceableTask {
    SliceableTask {
        id: 1,
        total_ops: 1000.0,
        sliceable_fraction: 1.0,
        ship_bytes: ship,
        result_bytes: result,
        deadline_ms: None,
    }
}

fn client() -> ComputeProfile {
    ComputeProfile { node: NodeId(0), total_capacity: 100.0, reserved_local: 0.0 }
}

fn host() -> HostAdvertisement {
    HostAdvertisement { host: NodeId(1), shareable: 1000.0, signaling_rtt_us: 10_000 }
}

const MB: u64 = 1_048_576;

#[test]
fn worked_example_offloads() {
    let t = task(MB, MB / 10);
    let p = decide_offload(&t, &client(), &host(), 100e6, 1000.0, 0.0);
    // 0.01 + 8.39 Mbit / 100 Mbit/s + 1000 / 1000 + 0.839 Mbit / 100 Mbit/s
    let hand = 0.01 + (MB * 8) as f64 / 100e6 + 1.0 + ((MB / 10) * 8) as f64 / 100e6;
    assert_eq!(p.decision, OffloadDecision::RequestOffload);
    assert!((p.estimate.offload - hand).abs() < 1e-12);
    assert!((p.estimate.offload - 1.10).abs() < 0.005);
    assert_eq!(p.estimate.local, 10.0);
}

#[test]
fn slow_link_stays_local() {
    let p = decide_offload(&task(MB, MB / 10), &client(), &host(), 0.1e6, 1000.0, 0.0);
    assert_eq!(p.decision, OffloadDecision::Local);
    assert!(p.estimate.ship > 83.0 && p.estimate.ship < 84.0);
}

#[test]
fn sequential_host_debits() {
    let mut l = HostLedger::new(ComputeProfile { node: NodeId(1), total_capacity: 1000.0, reserved_local: 0.5 }, 0.0);
    assert_eq!(l.host_admit(SessionId(1), 300.0), HostVerdict::Grant(300.0));
    assert_eq!(l.host_admit(SessionId(2), 300.0), HostVerdict::Grant(200.0));
    assert_eq!(l.host_admit(SessionId(3), 300.0), HostVerdict::Decline);
}

#[test]
fn one_megabyte_in_kilobyte_pdus() {
    assert_eq!(pdu_count(MB, 1000), 1049);
    assert_eq!(pdu_count(0, 1000), 0);
}

proptest! {
    #[test]
    fn faster_links_never_flip_to_local(r1 in 1e4f64..1e9, r2 in 1e4f64..1e9, ship in 1u64..(50 * MB)) {
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let t = task(ship, ship / 10);
        let slow = decide_offload(&t, &client(), &host(), lo, 1000.0, 0.0);
        let fast = decide_offload(&t, &client(), &host(), hi, 1000.0, 0.0);
        if slow.decision == OffloadDecision::RequestOffload {
            prop_assert_eq!(fast.decision, OffloadDecision::RequestOffload);
        }
        prop_assert!(fast.estimate.offload <= slow.estimate.offload);
    }
}
