//! Discrete-event network simulator.
//!
//! Events are processed in `(time, seq)` order, where `seq` is the order in
//! which they were scheduled. The engine is pull-based: a driver calls
//! [`Simulator::step`] and reacts to what comes out, scheduling more events
//! through `send`, `set_timer` and `schedule_compute`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::membership::NodeId;
use crate::metrics::{ByteLedger, Bytes, TransferRecord};
use crate::rng::{self, splitmix64};

/// Virtual time in microseconds.
pub type Time = u64;

pub const MICROS_PER_MS: Time = 1000;

pub fn from_ms(ms: f64) -> Time {
    (ms * MICROS_PER_MS as f64).round().max(0.0) as Time
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("latency matrix: {0}")]
    Matrix(String),
    #[error("latency matrix io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid latency range [{lo}, {hi}] ms")]
    Range { lo: f64, hi: f64 },
    #[error("fault schedule: {0}")]
    Schedule(String),
    #[error("compute model: {0}")]
    Compute(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatencySpec {
    /// Symmetric per-pair one-way delays, uniform in `[lo_ms, hi_ms]`.
    Synthetic { lo_ms: f64, hi_ms: f64 },
    /// Headerless CSV of round-trip times in milliseconds between sites.
    Matrix { path: PathBuf },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Synthetic {
            lo_ms: 10.0,
            hi_ms: 150.0,
        }
    }
}

/// One-way delays between every pair of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyModel {
    n: usize,
    one_way: Vec<Time>,
}

/// Floor for distinct nodes that share a site whose diagonal is zero.
pub const MIN_PEER_DELAY: Time = MICROS_PER_MS;

impl LatencyModel {
    pub fn uniform(n: usize, delay: Time) -> Self {
        let mut one_way = vec![delay; n * n];
        for i in 0..n {
            one_way[i * n + i] = 0;
        }
        Self { n, one_way }
    }

    pub fn synthetic(n: usize, lo_ms: f64, hi_ms: f64, seed: u64) -> Result<Self, SimError> {
        if !(lo_ms > 0.0 && hi_ms >= lo_ms && hi_ms.is_finite()) {
            return Err(SimError::Range {
                lo: lo_ms,
                hi: hi_ms,
            });
        }
        let mut r = rng::stream(seed, &[rng::tag::LATENCY]);
        let mut one_way = vec![0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = from_ms(if hi_ms > lo_ms {
                    r.random_range(lo_ms..=hi_ms)
                } else {
                    lo_ms
                });
                one_way[i * n + j] = d;
                one_way[j * n + i] = d;
            }
        }
        Ok(Self { n, one_way })
    }

    /// Nodes are assigned to sites round-robin by index; one-way delay is
    /// half the round-trip time.
    pub fn from_rtt_matrix(rtt_ms: &[Vec<f64>], n: usize) -> Result<Self, SimError> {
        let sites = rtt_ms.len();
        if sites == 0 {
            return Err(SimError::Matrix("no rows".into()));
        }
        for (i, row) in rtt_ms.iter().enumerate() {
            if row.len() != sites {
                return Err(SimError::Matrix(format!(
                    "row {i} has {} columns, expected {sites}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(SimError::Matrix(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
        }
        let mut one_way = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = from_ms(rtt_ms[i % sites][j % sites] / 2.0);
                one_way[i * n + j] = d.max(MIN_PEER_DELAY);
            }
        }
        Ok(Self { n, one_way })
    }

    pub fn from_csv<R: Read>(reader: R, n: usize) -> Result<Self, SimError> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| SimError::Matrix(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| SimError::Matrix(format!("{f:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rtt_matrix(&rows, n)
    }

    pub fn load(spec: &LatencySpec, n: usize, seed: u64, base: &Path) -> Result<Self, SimError> {
        match spec {
            LatencySpec::Synthetic { lo_ms, hi_ms } => Self::synthetic(n, *lo_ms, *hi_ms, seed),
            LatencySpec::Matrix { path } => {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base.join(path)
                };
                Self::from_csv(std::fs::File::open(full)?, n)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, from: NodeId, to: NodeId) -> Time {
        self.one_way[from.index() * self.n + to.index()]
    }

    pub fn max_one_way(&self) -> Time {
        self.one_way.iter().copied().max().unwrap_or(0)
    }

    /// Largest round-trip time between any two nodes.
    pub fn max_rtt(&self) -> Time {
        let mut m = 0;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self.one_way[i * self.n + j] + self.one_way[j * self.n + i]);
            }
        }
        m
    }

    /// Median one-way delay from `i` to the other nodes in `among`.
    pub fn median_to(&self, i: NodeId, among: &[NodeId]) -> Time {
        let mut d: Vec<Time> = among
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| self.get(i, j))
            .collect();
        if d.is_empty() {
            return 0;
        }
        d.sort_unstable();
        let m = d.len() / 2;
        if d.len() % 2 == 1 {
            d[m]
        } else {
            (d[m - 1] + d[m]) / 2
        }
    }

    /// Node with the lowest median latency to the others; ties go to the
    /// smaller id.
    pub fn most_central(&self, among: &[NodeId]) -> Option<NodeId> {
        among
            .iter()
            .copied()
            .min_by_key(|&i| (self.median_to(i, among), i))
    }
}

/// Duration of one local training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ComputeModel {
    Constant { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
    LogNormal { median_ms: f64, sigma: f64 },
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel::LogNormal {
            median_ms: 1000.0,
            sigma: 0.25,
        }
    }
}

impl ComputeModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = match *self {
            ComputeModel::Constant { ms } => ms >= 0.0 && ms.is_finite(),
            ComputeModel::Uniform { lo_ms, hi_ms } => {
                lo_ms >= 0.0 && hi_ms >= lo_ms && hi_ms.is_finite()
            }
            ComputeModel::LogNormal { median_ms, sigma } => {
                median_ms > 0.0 && median_ms.is_finite() && sigma >= 0.0 && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Compute(
                "durations must be finite and non-negative",
            ))
        }
    }

    /// Duration of `node`'s training for `round`; at least one microsecond.
    pub fn sample(&self, seed: u64, node: NodeId, round: u64) -> Time {
        let mut r = rng::stream(seed, &[rng::tag::COMPUTE, node.0, round]);
        let ms = match *self {
            ComputeModel::Constant { ms } => ms,
            ComputeModel::Uniform { lo_ms, hi_ms } => {
                if hi_ms > lo_ms {
                    r.random_range(lo_ms..=hi_ms)
                } else {
                    lo_ms
                }
            }
            ComputeModel::LogNormal { median_ms, sigma } => LogNormal::new(median_ms.ln(), sigma)
                .expect("validated parameters")
                .sample(&mut r),
        };
        from_ms(ms).max(1)
    }

    /// Mean duration in microseconds.
    pub fn mean(&self) -> Time {
        let ms = match *self {
            ComputeModel::Constant { ms } => ms,
            ComputeModel::Uniform { lo_ms, hi_ms } => (lo_ms + hi_ms) / 2.0,
            ComputeModel::LogNormal { median_ms, sigma } => median_ms * (sigma * sigma / 2.0).exp(),
        };
        from_ms(ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    Crash,
    Recover,
    Join,
    Leave,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub time_ms: f64,
    pub action: FaultKind,
    pub node: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FaultAction {
    pub kind: FaultKind,
    pub node: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultSchedule {
    pub entries: Vec<FaultEntry>,
}

impl FaultSchedule {
    pub fn new(entries: Vec<FaultEntry>) -> Self {
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids that enter through a `join` action.
    pub fn joiners(&self) -> BTreeSet<NodeId> {
        self.entries
            .iter()
            .filter(|e| e.action == FaultKind::Join)
            .map(|e| NodeId(e.node))
            .collect()
    }

    /// Highest node id referenced plus one.
    pub fn max_node_bound(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.node as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Checks ordering and id ranges for `initial` starting nodes, with
    /// joiners required to use ids at or above `initial`.
    pub fn validate(&self, initial: usize) -> Result<(), SimError> {
        let mut last = f64::NEG_INFINITY;
        let joiners = self.joiners();
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.time_ms.is_finite() && e.time_ms >= 0.0) {
                return Err(SimError::Schedule(format!(
                    "entry {i}: invalid time {}",
                    e.time_ms
                )));
            }
            if e.time_ms < last {
                return Err(SimError::Schedule(format!(
                    "entry {i}: times must be non-decreasing"
                )));
            }
            last = e.time_ms;
            let j = NodeId(e.node);
            let known = (e.node as usize) < initial || joiners.contains(&j);
            if !known {
                return Err(SimError::Schedule(format!(
                    "entry {i}: node {} is neither initial nor a joiner",
                    e.node
                )));
            }
            if e.action == FaultKind::Join && (e.node as usize) < initial {
                return Err(SimError::Schedule(format!(
                    "entry {i}: join for initial node {}",
                    e.node
                )));
            }
        }
        Ok(())
    }

    /// Largest number of simultaneously crashed or departed nodes.
    pub fn max_concurrent_failures(&self) -> usize {
        let mut down = BTreeSet::new();
        let mut max = 0;
        for e in &self.entries {
            match e.action {
                FaultKind::Crash | FaultKind::Leave => {
                    down.insert(e.node);
                }
                FaultKind::Recover | FaultKind::Join => {
                    down.remove(&e.node);
                }
            }
            max = max.max(down.len());
        }
        max
    }

    /// Time of the last crash, if any.
    pub fn last_crash(&self) -> Option<Time> {
        self.entries
            .iter()
            .filter(|e| e.action == FaultKind::Crash)
            .map(|e| from_ms(e.time_ms))
            .max()
    }
}

/// Message payloads know their accounted size.
pub trait Payload {
    fn bytes(&self) -> Bytes;
    /// Short label for logs and transfer records.
    fn kind(&self) -> &'static str;
    /// Protocol round carried by the message, if any.
    fn round(&self) -> u64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimerId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ComputeId(u64);

/// What the engine hands back from [`Simulator::step`].
#[derive(Clone, Debug, PartialEq)]
pub enum Event<M, T> {
    Message {
        from: NodeId,
        to: NodeId,
        msg: M,
    },
    Timer {
        node: NodeId,
        id: TimerId,
        payload: T,
    },
    Compute {
        node: NodeId,
        id: ComputeId,
        payload: T,
    },
    Fault(FaultAction),
}

enum Pending<M, T> {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: M,
        bytes: Bytes,
        transfer: Option<usize>,
    },
    Timer {
        node: NodeId,
        epoch: u64,
        id: u64,
        payload: T,
    },
    Compute {
        node: NodeId,
        epoch: u64,
        id: u64,
        payload: T,
    },
    Fault(FaultAction),
}

struct Scheduled<M, T> {
    time: Time,
    seq: u64,
    item: Pending<M, T>,
}

impl<M, T> PartialEq for Scheduled<M, T> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl<M, T> Eq for Scheduled<M, T> {}
impl<M, T> PartialOrd for Scheduled<M, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M, T> Ord for Scheduled<M, T> {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeState {
    /// Not yet joined.
    Absent,
    Up,
    Down,
}

pub struct Simulator<M, T> {
    now: Time,
    seq: u64,
    next_id: u64,
    queue: BinaryHeap<Scheduled<M, T>>,
    latency: LatencyModel,
    state: Vec<NodeState>,
    epoch: Vec<u64>,
    live_timers: BTreeSet<u64>,
    live_computes: BTreeSet<u64>,
    ledger: ByteLedger,
    transfers: Vec<TransferRecord>,
    digest: u64,
    processed: u64,
    log_transfers: bool,
}

impl<M: Payload, T> Simulator<M, T> {
    /// Nodes below `initial` start up; the rest are absent until they join.
    pub fn new(latency: LatencyModel, initial: usize) -> Self {
        let n = latency.len();
        let state = (0..n)
            .map(|i| {
                if i < initial {
                    NodeState::Up
                } else {
                    NodeState::Absent
                }
            })
            .collect();
        Self {
            now: 0,
            seq: 0,
            next_id: 0,
            queue: BinaryHeap::new(),
            latency,
            state,
            epoch: vec![0; n],
            live_timers: BTreeSet::new(),
            live_computes: BTreeSet::new(),
            ledger: ByteLedger::new(n),
            transfers: Vec::new(),
            digest: 0xcbf2_9ce4_8422_2325,
            processed: 0,
            log_transfers: true,
        }
    }

    pub fn set_transfer_logging(&mut self, on: bool) {
        self.log_transfers = on;
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn node_count(&self) -> usize {
        self.state.len()
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn state(&self, j: NodeId) -> NodeState {
        self.state[j.index()]
    }

    pub fn is_up(&self, j: NodeId) -> bool {
        self.state[j.index()] == NodeState::Up
    }

    pub fn live_nodes(&self) -> Vec<NodeId> {
        (0..self.state.len())
            .filter(|&i| self.state[i] == NodeState::Up)
            .map(|i| NodeId(i as u64))
            .collect()
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    pub fn transfers(&self) -> &[TransferRecord] {
        &self.transfers
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn peek_time(&self) -> Option<Time> {
        self.queue.peek().map(|s| s.time)
    }

    pub fn into_parts(self) -> (ByteLedger, Vec<TransferRecord>, u64, u64) {
        (self.ledger, self.transfers, self.digest, self.processed)
    }

    fn push(&mut self, time: Time, item: Pending<M, T>) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Scheduled { time, seq, item });
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn mix(&mut self, v: u64) {
        self.digest = splitmix64(self.digest ^ v);
    }

    /// Sends `msg`; delivery happens after the one-way delay unless the
    /// recipient is down at that time. The sender is charged immediately.
    pub fn send(&mut self, from: NodeId, to: NodeId, msg: M) {
        debug_assert!(self.is_up(from), "send from a node that is not up");
        let bytes = msg.bytes();
        self.ledger.record_send(from, bytes);
        let transfer = (self.log_transfers && bytes.model > 0).then(|| {
            self.transfers.push(TransferRecord {
                time: self.now,
                from,
                to,
                kind: msg.kind(),
                round: msg.round(),
                bytes,
                delivered: false,
            });
            self.transfers.len() - 1
        });
        let at = self.now + self.latency.get(from, to);
        self.push(
            at,
            Pending::Deliver {
                from,
                to,
                msg,
                bytes,
                transfer,
            },
        );
    }

    pub fn set_timer(&mut self, node: NodeId, delay: Time, payload: T) -> TimerId {
        let id = self.fresh_id();
        self.live_timers.insert(id);
        let epoch = self.epoch[node.index()];
        self.push(
            self.now + delay.max(1),
            Pending::Timer {
                node,
                epoch,
                id,
                payload,
            },
        );
        TimerId(id)
    }

    /// Suppresses a timer that has not fired yet.
    pub fn cancel_timer(&mut self, id: TimerId) -> bool {
        self.live_timers.remove(&id.0)
    }

    pub fn schedule_compute(&mut self, node: NodeId, duration: Time, payload: T) -> ComputeId {
        debug_assert!(self.is_up(node), "compute on a node that is not up");
        let id = self.fresh_id();
        self.live_computes.insert(id);
        let epoch = self.epoch[node.index()];
        self.push(
            self.now + duration,
            Pending::Compute {
                node,
                epoch,
                id,
                payload,
            },
        );
        ComputeId(id)
    }

    pub fn cancel_compute(&mut self, id: ComputeId) -> bool {
        self.live_computes.remove(&id.0)
    }

    pub fn schedule_fault(&mut self, time: Time, action: FaultAction) {
        self.push(time.max(self.now), Pending::Fault(action));
    }

    pub fn schedule_faults(&mut self, schedule: &FaultSchedule) {
        for e in &schedule.entries {
            self.schedule_fault(
                from_ms(e.time_ms),
                FaultAction {
                    kind: e.action,
                    node: NodeId(e.node),
                },
            );
        }
    }

    /// Takes a node down: pending timers and computations are discarded and
    /// later deliveries to it are dropped.
    pub fn crash(&mut self, j: NodeId) {
        if self.state[j.index()] == NodeState::Up {
            self.state[j.index()] = NodeState::Down;
            self.epoch[j.index()] += 1;
        }
    }

    pub fn bring_up(&mut self, j: NodeId) {
        self.state[j.index()] = NodeState::Up;
    }

    /// Next event, or `None` once the queue is empty. Events that no longer
    /// apply (cancelled timers, deliveries to crashed nodes, stale
    /// computations) are consumed silently.
    pub fn step(&mut self) -> Option<(Time, Event<M, T>)> {
        while let Some(Scheduled { time, seq, item }) = self.queue.pop() {
            self.now = time;
            let ev = match item {
                Pending::Deliver {
                    from,
                    to,
                    msg,
                    bytes,
                    transfer,
                } => {
                    if !self.is_up(to) {
                        continue;
                    }
                    self.ledger.record_receive(to, bytes);
                    if let Some(t) = transfer {
                        self.transfers[t].delivered = true;
                    }
                    self.mix(1);
                    self.mix(from.0);
                    self.mix(to.0);
                    self.mix(bytes.total());
                    self.mix(msg.round());
                    Event::Message { from, to, msg }
                }
                Pending::Timer {
                    node,
                    epoch,
                    id,
                    payload,
                } => {
                    if !self.live_timers.remove(&id) || epoch != self.epoch[node.index()] {
                        continue;
                    }
                    self.mix(2);
                    self.mix(node.0);
                    Event::Timer {
                        node,
                        id: TimerId(id),
                        payload,
                    }
                }
                Pending::Compute {
                    node,
                    epoch,
                    id,
                    payload,
                } => {
                    if !self.live_computes.remove(&id) || epoch != self.epoch[node.index()] {
                        continue;
                    }
                    self.mix(3);
                    self.mix(node.0);
                    Event::Compute {
                        node,
                        id: ComputeId(id),
                        payload,
                    }
                }
                Pending::Fault(action) => {
                    match action.kind {
                        FaultKind::Crash => self.crash(action.node),
                        FaultKind::Recover | FaultKind::Join => self.bring_up(action.node),
                        FaultKind::Leave => {}
                    }
                    self.mix(4);
                    self.mix(action.node.0);
                    self.mix(action.kind as u64);
                    Event::Fault(action)
                }
            };
            self.mix(time);
            self.mix(seq);
            self.processed += 1;
            return Some((time, ev));
        }
        None
    }
}
