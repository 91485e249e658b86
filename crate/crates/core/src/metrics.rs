//! Byte accounting, round and propagation traces, and run export.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::learning::{Metrics, Target};
use crate::membership::NodeId;
use crate::protocol::Model;
use crate::simnet::Time;

/// Bytes of one message, split into model payload and everything else.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Bytes {
    pub model: u64,
    pub overhead: u64,
}

impl Bytes {
    pub fn overhead(overhead: u64) -> Self {
        Self { model: 0, overhead }
    }

    pub fn total(&self) -> u64 {
        self.model + self.overhead
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NodeBytes {
    pub model_in: u64,
    pub model_out: u64,
    pub overhead_in: u64,
    pub overhead_out: u64,
}

impl NodeBytes {
    /// Network usage: incoming plus outgoing.
    pub fn usage(&self) -> u64 {
        self.model_in + self.model_out + self.overhead_in + self.overhead_out
    }

    pub fn model(&self) -> u64 {
        self.model_in + self.model_out
    }

    pub fn overhead(&self) -> u64 {
        self.overhead_in + self.overhead_out
    }

    fn add(&mut self, o: &NodeBytes) {
        self.model_in += o.model_in;
        self.model_out += o.model_out;
        self.overhead_in += o.overhead_in;
        self.overhead_out += o.overhead_out;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ByteLedger {
    nodes: Vec<NodeBytes>,
}

impl ByteLedger {
    pub fn new(n: usize) -> Self {
        Self {
            nodes: vec![NodeBytes::default(); n],
        }
    }

    pub fn record_send(&mut self, from: NodeId, b: Bytes) {
        let e = &mut self.nodes[from.index()];
        e.model_out += b.model;
        e.overhead_out += b.overhead;
    }

    pub fn record_receive(&mut self, to: NodeId, b: Bytes) {
        let e = &mut self.nodes[to.index()];
        e.model_in += b.model;
        e.overhead_in += b.overhead;
    }

    /// A delivered transfer: both endpoints are charged.
    pub fn record_transfer(&mut self, from: NodeId, to: NodeId, b: Bytes) {
        self.record_send(from, b);
        self.record_receive(to, b);
    }

    pub fn node(&self, j: NodeId) -> NodeBytes {
        self.nodes[j.index()]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &NodeBytes)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, b)| (NodeId(i as u64), b))
    }

    /// Column sums over all nodes.
    pub fn totals(&self) -> NodeBytes {
        let mut t = NodeBytes::default();
        for b in &self.nodes {
            t.add(b);
        }
        t
    }

    /// Overhead / (overhead + model), over summed usage.
    pub fn overhead_share(&self) -> f64 {
        let t = self.totals();
        let all = t.usage();
        if all == 0 {
            0.0
        } else {
            t.overhead() as f64 / all as f64
        }
    }

    /// Usage statistics over the given nodes.
    pub fn usage_stats(&self, nodes: impl IntoIterator<Item = NodeId>) -> UsageStats {
        let mut min = u64::MAX;
        let mut max = 0;
        let mut max_node = NodeId(0);
        let mut sum = 0u64;
        let mut count = 0usize;
        for j in nodes {
            let u = self.nodes[j.index()].usage();
            min = min.min(u);
            if u > max {
                max = u;
                max_node = j;
            }
            sum += u;
            count += 1;
        }
        if count == 0 {
            return UsageStats::default();
        }
        let mean = sum as f64 / count as f64;
        UsageStats {
            min,
            max,
            max_node,
            mean,
            max_over_mean: if mean > 0.0 { max as f64 / mean } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct UsageStats {
    pub min: u64,
    pub max: u64,
    pub max_node: NodeId,
    pub mean: f64,
    pub max_over_mean: f64,
}

/// One model-carrying message.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferRecord {
    pub time: Time,
    pub from: NodeId,
    pub to: NodeId,
    pub kind: &'static str,
    pub round: u64,
    pub bytes: Bytes,
    pub delivered: bool,
}

/// Per-round record. `start` is when the round's first trainer sample was
/// started and `end` when the first aggregator of the next round finished.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round: u64,
    pub start: Time,
    pub end: Option<Time>,
    pub sample_duration: Option<Time>,
    pub completed_aggregators: usize,
    pub trainers: Vec<NodeId>,
    pub metrics: Option<Metrics>,
    /// (live node, crashed node) pairs where the crashed node was still a
    /// candidate in the live node's view when the round started.
    pub dead_candidates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimelinePoint {
    pub time: Time,
    /// Completed training rounds.
    pub round: u64,
    pub loss: f64,
    pub score: f64,
    /// Spread across local models, for methods without a global model.
    pub score_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropagationTrace {
    pub joiner: NodeId,
    pub join_time: Time,
    pub join_round: u64,
    /// First time each observer's view held the joiner as registered.
    pub observers: BTreeMap<NodeId, Time>,
    pub complete_time: Option<Time>,
    pub complete_round: Option<u64>,
}

impl PropagationTrace {
    pub fn new(joiner: NodeId, join_time: Time, join_round: u64) -> Self {
        Self {
            joiner,
            join_time,
            join_round,
            observers: BTreeMap::new(),
            complete_time: None,
            complete_round: None,
        }
    }

    pub fn record_view_inclusion(&mut self, observer: NodeId, time: Time) {
        self.observers.entry(observer).or_insert(time);
    }

    /// Rounds between the join and full propagation.
    pub fn rounds_to_complete(&self) -> Option<u64> {
        self.complete_round
            .map(|r| r.saturating_sub(self.join_round))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StallReport {
    pub time: Time,
    pub last_round: u64,
    pub live_nodes: usize,
    /// (node, round, live candidates) for every sample request waiting to retry.
    pub stalled_requests: Vec<(NodeId, u64, usize)>,
    pub reason: String,
}

/// Everything a run produced.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub method: String,
    pub nodes: usize,
    pub model_params: usize,
    pub target: Option<Target>,
    pub ledger: ByteLedger,
    pub transfers: Vec<TransferRecord>,
    pub rounds: Vec<RoundTrace>,
    pub timeline: Vec<TimelinePoint>,
    pub propagation: Vec<PropagationTrace>,
    pub event_digest: u64,
    pub events: u64,
    pub end_time: Time,
    pub stall: Option<StallReport>,
    /// Nodes counted in per-node statistics.
    pub participants: Vec<NodeId>,
    /// Aggregated model per completed round, when recording was requested.
    pub trajectory: Vec<(u64, Model)>,
    /// Aggregations whose result differed from the first one of the same round.
    pub trajectory_mismatches: usize,
    /// Set when the run aborted on a local training failure.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub method: String,
    pub nodes: usize,
    pub model_params: usize,
    pub rounds_completed: u64,
    pub end_time_ms: f64,
    pub events: u64,
    pub event_digest: String,
    pub total_usage_bytes: u64,
    pub model_usage_bytes: u64,
    pub overhead_usage_bytes: u64,
    pub overhead_share: f64,
    pub per_node: UsageStats,
    pub model_transfers: usize,
    pub target: Option<Target>,
    pub time_to_target_ms: Option<f64>,
    pub rounds_to_target: Option<u64>,
    pub final_loss: Option<f64>,
    pub final_score: Option<f64>,
    pub stalled: bool,
    pub stall: Option<StallReport>,
}

pub fn to_ms(t: Time) -> f64 {
    t as f64 / 1000.0
}

impl RunReport {
    /// First timeline point meeting the target.
    pub fn first_reaching_target(&self) -> Option<&TimelinePoint> {
        let target = self.target?;
        self.timeline.iter().find(|p| {
            target.reached(&Metrics {
                loss: p.loss,
                accuracy: matches!(target, Target::AccuracyAtLeast(_)).then_some(p.score),
            })
        })
    }

    pub fn rounds_completed(&self) -> u64 {
        self.timeline.last().map_or(0, |p| p.round)
    }

    pub fn summary(&self) -> Summary {
        let totals = self.ledger.totals();
        let hit = self.first_reaching_target();
        Summary {
            method: self.method.clone(),
            nodes: self.nodes,
            model_params: self.model_params,
            rounds_completed: self.rounds_completed(),
            end_time_ms: to_ms(self.end_time),
            events: self.events,
            event_digest: format!("{:016x}", self.event_digest),
            total_usage_bytes: totals.usage(),
            model_usage_bytes: totals.model(),
            overhead_usage_bytes: totals.overhead(),
            overhead_share: self.ledger.overhead_share(),
            per_node: self.ledger.usage_stats(self.participants.iter().copied()),
            model_transfers: self.transfers.len(),
            target: self.target,
            time_to_target_ms: hit.map(|p| to_ms(p.time)),
            rounds_to_target: hit.map(|p| p.round),
            final_loss: self.timeline.last().map(|p| p.loss),
            final_score: self.timeline.last().map(|p| p.score),
            stalled: self.stall.is_some(),
            stall: self.stall.clone(),
        }
    }

    /// Writes timeline.csv, bytes.csv, rounds.csv, propagation.csv and
    /// summary.json into `dir`.
    pub fn export(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("timeline.csv"))?;
        w.write_record(["time_ms", "round", "loss", "score", "score_std"])?;
        for p in &self.timeline {
            w.write_record([
                to_ms(p.time).to_string(),
                p.round.to_string(),
                p.loss.to_string(),
                p.score.to_string(),
                p.score_std.map_or(String::new(), |s| s.to_string()),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("bytes.csv"))?;
        w.write_record([
            "node",
            "model_in",
            "model_out",
            "overhead_in",
            "overhead_out",
        ])?;
        for (j, b) in self.ledger.iter() {
            w.write_record([
                j.0.to_string(),
                b.model_in.to_string(),
                b.model_out.to_string(),
                b.overhead_in.to_string(),
                b.overhead_out.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("rounds.csv"))?;
        w.write_record([
            "round",
            "start_ms",
            "end_ms",
            "sample_ms",
            "completed_aggregators",
            "trainers",
            "loss",
            "score",
            "dead_candidates",
        ])?;
        for r in &self.rounds {
            let trainers: Vec<String> = r.trainers.iter().map(|t| t.0.to_string()).collect();
            w.write_record([
                r.round.to_string(),
                to_ms(r.start).to_string(),
                r.end.map_or(String::new(), |t| to_ms(t).to_string()),
                r.sample_duration
                    .map_or(String::new(), |t| to_ms(t).to_string()),
                r.completed_aggregators.to_string(),
                trainers.join(" "),
                r.metrics.map_or(String::new(), |m| m.loss.to_string()),
                r.metrics.map_or(String::new(), |m| m.score().to_string()),
                r.dead_candidates.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("propagation.csv"))?;
        w.write_record(["joiner", "join_ms", "join_round", "observer", "included_ms"])?;
        for p in &self.propagation {
            for (obs, t) in &p.observers {
                w.write_record([
                    p.joiner.0.to_string(),
                    to_ms(p.join_time).to_string(),
                    p.join_round.to_string(),
                    obs.0.to_string(),
                    to_ms(*t).to_string(),
                ])?;
            }
        }
        w.flush()?;

        let summary = serde_json::to_string_pretty(&self.summary()).map_err(io::Error::other)?;
        fs::write(dir.join("summary.json"), summary + "\n")
    }
}
