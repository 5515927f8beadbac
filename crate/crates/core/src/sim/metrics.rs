use std::borrow::Cow;
use std::io::{self, Write};

use crate::ids::{NodeId, SliceNetId};
use crate::sim::SimTime;

pub const CSV_HEADER: &str = "time_us,slice_id,node_id,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub time: SimTime,
    pub slice: Option<SliceNetId>,
    pub node: Option<NodeId>,
    pub metric: Cow<'static, str>,
    pub value: f64,
}

/// Append-only sink of metric observations in nondecreasing time order.
#[derive(Debug, Default, Clone)]
pub struct MetricsBus {
    records: Vec<MetricRecord>,
}

impl MetricsBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(
        &mut self,
        time: SimTime,
        slice: Option<SliceNetId>,
        node: Option<NodeId>,
        metric: &'static str,
        value: f64,
    ) {
        if let Some(last) = self.records.last() {
            assert!(
                time >= last.time,
                "metric {metric} at {time} us emitted after {} us",
                last.time
            );
        }
        self.records.push(MetricRecord {
            time,
            slice,
            node,
            metric: Cow::Borrowed(metric),
            value,
        });
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Maps node ids to the names used in CSV output. Unknown ids print as `#<id>`.
#[derive(Debug, Default, Clone)]
pub struct NodeNames(pub Vec<String>);

impl NodeNames {
    pub fn name(&self, id: NodeId) -> Cow<'_, str> {
        match self.0.get(id.0 as usize) {
            Some(n) => Cow::Borrowed(n.as_str()),
            None => Cow::Owned(format!("#{}", id.0)),
        }
    }
}

pub fn write_metrics_csv<W: Write>(
    out: &mut W,
    records: &[MetricRecord],
    names: &NodeNames,
) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        let slice = r.slice.map(|s| s.0.to_string()).unwrap_or_default();
        let node = r.node.map(|n| names.name(n).into_owned()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.time, slice, node, r.metric, r.value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let mut bus = MetricsBus::new();
        bus.emit(0, Some(SliceNetId(2)), Some(NodeId(0)), "served_bytes", 100.0);
        bus.emit(5, None, Some(NodeId(7)), "x", 0.5);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, bus.records(), &NodeNames(vec!["ap1".into()])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "time_us,slice_id,node_id,metric,value\n0,2,ap1,served_bytes,100\n5,,#7,x,0.5\n"
        );
    }

    #[test]
    #[should_panic(expected = "emitted after")]
    fn out_of_order_emit_panics() {
        let mut bus = MetricsBus::new();
        bus.emit(10, None, None, "a", 1.0);
        bus.emit(9, None, None, "b", 1.0);
    }
}
