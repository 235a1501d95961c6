//! Per-link and per-node counters, periodic snapshots, and the metrics CSV.
//!
//! CSV columns: `tick,node,link_peer,msgs_sent,msgs_delivered,global_ops,group_ops,local_ops`.
//! Every snapshot emits, for each node, one summary row with `link_peer = -`
//! (totals over all its outgoing links plus its operation counts) followed by
//! one row per peer it has sent to (link counts only; op columns are 0). All
//! values are cumulative from the start of the run, so they are monotone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub global_ops: u64,
    pub group_ops: u64,
    pub local_ops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    Global,
    Group,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    tick: u64,
    links: BTreeMap<(NodeId, NodeId), LinkCounters>,
    ops: BTreeMap<NodeId, OpCounters>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    links: BTreeMap<(NodeId, NodeId), LinkCounters>,
    ops: BTreeMap<NodeId, OpCounters>,
    latencies: BTreeMap<String, Vec<u64>>,
    snapshots: Vec<Snapshot>,
}

pub const CSV_HEADER: &str = "tick,node,link_peer,msgs_sent,msgs_delivered,global_ops,group_ops,local_ops";

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_sent(&mut self, from: NodeId, to: NodeId) {
        self.links.entry((from, to)).or_default().sent += 1;
    }

    pub fn record_delivered(&mut self, from: NodeId, to: NodeId) {
        self.links.entry((from, to)).or_default().delivered += 1;
    }

    pub fn record_dropped(&mut self, from: NodeId, to: NodeId) {
        self.links.entry((from, to)).or_default().dropped += 1;
    }

    /// A control message that is accounted but not simulated as an event
    /// (replica synchronisation, heartbeats).
    pub fn record_control(&mut self, from: NodeId, to: NodeId, count: u64) {
        let c = self.links.entry((from, to)).or_default();
        c.sent += count;
        c.delivered += count;
    }

    pub fn record_op(&mut self, node: NodeId, class: OpClass) {
        let c = self.ops.entry(node).or_default();
        match class {
            OpClass::Global => c.global_ops += 1,
            OpClass::Group => c.group_ops += 1,
            OpClass::Local => c.local_ops += 1,
        }
    }

    pub fn record_latency(&mut self, class: &str, ticks: u64) {
        self.latencies.entry(class.to_owned()).or_default().push(ticks);
    }

    pub fn latency_samples(&self, class: &str) -> &[u64] {
        self.latencies.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> LinkCounters {
        self.links.get(&(from, to)).copied().unwrap_or_default()
    }

    pub fn links(&self) -> impl Iterator<Item = ((NodeId, NodeId), LinkCounters)> + '_ {
        self.links.iter().map(|(k, v)| (*k, *v))
    }

    pub fn ops(&self, node: NodeId) -> OpCounters {
        self.ops.get(&node).copied().unwrap_or_default()
    }

    /// Messages sent between distinct nodes.
    pub fn network_sent(&self) -> u64 {
        self.links.iter().filter(|((a, b), _)| a != b).map(|(_, c)| c.sent).sum()
    }

    pub fn total_sent(&self) -> u64 {
        self.links.values().map(|c| c.sent).sum()
    }

    pub fn total_delivered(&self) -> u64 {
        self.links.values().map(|c| c.delivered).sum()
    }

    pub fn total_dropped(&self) -> u64 {
        self.links.values().map(|c| c.dropped).sum()
    }

    pub fn total_ops(&self) -> OpCounters {
        self.ops.values().fold(OpCounters::default(), |acc, c| OpCounters {
            global_ops: acc.global_ops + c.global_ops,
            group_ops: acc.group_ops + c.group_ops,
            local_ops: acc.local_ops + c.local_ops,
        })
    }

    /// Records the cumulative counters at `tick`. A second snapshot at the
    /// same tick replaces the first.
    pub fn snapshot(&mut self, tick: u64) {
        if self.snapshots.last().is_some_and(|s| s.tick == tick) {
            self.snapshots.pop();
        }
        self.snapshots.push(Snapshot { tick, links: self.links.clone(), ops: self.ops.clone() });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for snap in &self.snapshots {
            let mut nodes: Vec<NodeId> = snap.ops.keys().copied().collect();
            nodes.extend(snap.links.keys().map(|(a, _)| *a));
            nodes.sort_unstable();
            nodes.dedup();
            for node in nodes {
                let ops = snap.ops.get(&node).copied().unwrap_or_default();
                let outgoing: Vec<_> = snap.links.range((node, NodeId(0))..=(node, NodeId(u32::MAX))).collect();
                let sent: u64 = outgoing.iter().map(|(_, c)| c.sent).sum();
                let delivered: u64 = outgoing.iter().map(|(_, c)| c.delivered).sum();
                let _ = writeln!(
                    out,
                    "{},{},-,{},{},{},{},{}",
                    snap.tick, node, sent, delivered, ops.global_ops, ops.group_ops, ops.local_ops
                );
                for ((_, peer), c) in outgoing {
                    let _ = writeln!(out, "{},{},{},{},{},0,0,0", snap.tick, node, peer, c.sent, c.delivered);
                }
            }
        }
        out
    }
}

/// Value at quantile `q` (0..=1) of `samples` using nearest-rank on a sorted copy.
pub fn percentile(samples: &[u64], q: f64) -> Option<u64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = ((q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize).max(1);
    Some(sorted[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_are_cumulative() {
        let mut m = MetricsLog::new();
        m.record_sent(NodeId(1), NodeId(2));
        m.record_op(NodeId(1), OpClass::Global);
        m.snapshot(5);
        m.record_sent(NodeId(1), NodeId(2));
        m.record_delivered(NodeId(1), NodeId(2));
        m.snapshot(9);
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "5,n1,-,1,0,1,0,0");
        assert_eq!(lines[2], "5,n1,n2,1,0,0,0,0");
        assert_eq!(lines[3], "9,n1,-,2,1,1,0,0");
        assert_eq!(lines[4], "9,n1,n2,2,1,0,0,0");
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[], 0.5), None);
        assert_eq!(percentile(&[5, 1, 3], 0.5), Some(3));
        assert_eq!(percentile(&[1, 2, 3, 4], 0.5), Some(2));
        assert_eq!(percentile(&[1, 2, 3, 4], 1.0), Some(4));
    }
}
