//! Run summaries. The same reduction runs over in-memory records and over a
//! metrics CSV read back from disk, so `--audit` can compare the two.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::ids::SliceNetId;
use crate::sim::{MetricRecord, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub slice: u16,
    pub served_bytes: f64,
    pub throughput_mbps: f64,
    pub access_successes: u64,
    pub mean_access_delay_us: Option<f64>,
    pub p95_access_delay_us: Option<f64>,
    pub blocked_accesses: u64,
    pub offload_completed: u64,
    pub offload_failed: u64,
    pub offload_success_rate: Option<f64>,
    pub mean_offload_latency_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub duration_us: SimTime,
    pub slices: Vec<SliceSummary>,
    pub core_bytes: f64,
    pub edge_bytes: f64,
    pub core_edge_ratio: Option<f64>,
}

/// Nearest-rank percentile, `p` in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[derive(Default)]
struct Acc {
    served: f64,
    delays: Vec<f64>,
    blocked: u64,
    off_ok: u64,
    off_fail: u64,
    off_latency: f64,
}

/// Reduces `(slice, metric, value)` rows.
pub fn summarize_rows<'a>(rows: impl IntoIterator<Item = (Option<u16>, &'a str, f64)>, duration_us: SimTime) -> Summary {
    let mut per: BTreeMap<u16, Acc> = BTreeMap::new();
    let mut core = 0.0;
    let mut edge = 0.0;
    for (slice, metric, value) in rows {
        let Some(s) = slice else { continue };
        let a = per.entry(s).or_default();
        match metric {
            "served_bytes" => {
                a.served += value;
                edge += value;
            }
            "cn_ingress_bytes" => core += value,
            "rach_access_delay_us" => a.delays.push(value),
            "access_blocked" => a.blocked += 1,
            "offload_latency_us" => {
                a.off_ok += 1;
                a.off_latency += value;
            }
            "offload_failed" => a.off_fail += 1,
            _ => {}
        }
    }
    let secs = duration_us as f64 / 1e6;
    let slices = per
        .into_iter()
        .map(|(s, a)| {
            let n = a.delays.len();
            let sessions = a.off_ok + a.off_fail;
            SliceSummary {
                slice: s,
                served_bytes: a.served,
                throughput_mbps: if secs > 0.0 { a.served * 8.0 / secs / 1e6 } else { 0.0 },
                access_successes: n as u64,
                mean_access_delay_us: (n > 0).then(|| a.delays.iter().sum::<f64>() / n as f64),
                p95_access_delay_us: percentile(&a.delays, 95.0),
                blocked_accesses: a.blocked,
                offload_completed: a.off_ok,
                offload_failed: a.off_fail,
                offload_success_rate: (sessions > 0).then(|| a.off_ok as f64 / sessions as f64),
                mean_offload_latency_us: (a.off_ok > 0).then(|| a.off_latency / a.off_ok as f64),
            }
        })
        .collect();
    Summary {
        duration_us,
        slices,
        core_bytes: core,
        edge_bytes: edge,
        core_edge_ratio: (edge > 0.0).then(|| core / edge),
    }
}

pub fn summarize(records: &[MetricRecord], duration_us: SimTime) -> Summary {
    summarize_rows(
        records.iter().map(|r| (r.slice.map(|s: SliceNetId| s.0), r.metric.as_ref(), r.value)),
        duration_us,
    )
}

/// One row of a metrics CSV as written by the runner.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub time_us: SimTime,
    pub slice_id: Option<u16>,
    pub node_id: String,
    pub metric: String,
    pub value: f64,
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<CsvRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn summarize_csv(rows: &[CsvRow], duration_us: SimTime) -> Summary {
    summarize_rows(rows.iter().map(|r| (r.slice_id, r.metric.as_str(), r.value)), duration_us)
}

fn opt(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.3}", x * scale))
}

pub fn render_text(scenario: &str, seed: u64, s: &Summary) -> String {
    let mut out = format!(
        "scenario {scenario}  seed {seed}  duration {} ms\n\n",
        s.duration_us / 1000
    );
    out.push_str(&format!(
        "{:>5} {:>12} {:>10} {:>12} {:>12} {:>8} {:>9} {:>14}\n",
        "slice", "thru_mbps", "accesses", "delay_ms", "p95_ms", "blocked", "offload", "offload_ms"
    ));
    for x in &s.slices {
        out.push_str(&format!(
            "{:>5} {:>12.3} {:>10} {:>12} {:>12} {:>8} {:>9} {:>14}\n",
            x.slice,
            x.throughput_mbps,
            x.access_successes,
            opt(x.mean_access_delay_us, 1e-3),
            opt(x.p95_access_delay_us, 1e-3),
            x.blocked_accesses,
            opt(x.offload_success_rate, 1.0),
            opt(x.mean_offload_latency_us, 1e-3),
        ));
    }
    out.push_str(&format!(
        "\ncore bytes {}  edge bytes {}  core/edge {}\n",
        s.core_bytes,
        s.edge_bytes,
        opt(s.core_edge_ratio, 1.0)
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), Some(19.0));
        assert_eq!(percentile(&v, 100.0), Some(20.0));
        assert_eq!(percentile(&[7.0], 95.0), Some(7.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn reduction() {
        let rows = vec![
            (Some(1), "served_bytes", 125_000.0),
            (Some(1), "served_bytes", 125_000.0),
            (Some(1), "rach_access_delay_us", 1000.0),
            (Some(1), "rach_access_delay_us", 3000.0),
            (Some(2), "access_blocked", 1.0),
            (Some(2), "cn_ingress_bytes", 50.0),
            (Some(3), "offload_latency_us", 10.0),
            (Some(3), "offload_failed", 2.0),
            (None, "cp_overhead", 9.0),
        ];
        let s = summarize_rows(rows, 1_000_000);
        assert_eq!(s.slices.len(), 3);
        assert_eq!(s.slices[0].throughput_mbps, 2.0);
        assert_eq!(s.slices[0].mean_access_delay_us, Some(2000.0));
        assert_eq!(s.slices[0].p95_access_delay_us, Some(3000.0));
        assert_eq!(s.slices[1].blocked_accesses, 1);
        assert_eq!(s.slices[2].offload_success_rate, Some(0.5));
        assert_eq!(s.core_edge_ratio, Some(50.0 / 250_000.0));
    }

    #[test]
    fn csv_round_trip() {
        let text = "time_us,slice_id,node_id,metric,value\n0,1,ap,served_bytes,10.5\n3,,ap,cp_overhead,2\n";
        let rows = read_metrics_csv(text.as_bytes()).unwrap();
        assert_eq!(rows[1].slice_id, None);
        let s = summarize_csv(&rows, 1000);
        assert_eq!(s.edge_bytes, 10.5);
    }
}
