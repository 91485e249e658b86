//! Registry of join/leave events, per-node activity records and the views
//! that bundle them.
//!
//! Every structure here is a join-semilattice: merging keeps, per node, the
//! entry with the larger event counter (registry) or the larger round
//! (activity). Views are gossiped by piggybacking on model transfers, so
//! nodes that keep exchanging them converge to the key-wise maximum.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque node identifier.
///
/// The canonical byte encoding is the big-endian 64-bit value; it is what
/// the sampling hash consumes and what view sizes are accounted with.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const ENCODED_LEN: usize = 8;

    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Joined,
    Left,
}

/// Latest join/leave event per node, ordered by the node's own counter.
///
/// Counter and event live in the same map entry, so the two logical
/// dictionaries always share their key set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Registry {
    entries: BTreeMap<NodeId, (u64, EventKind)>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Nodes whose latest recorded event is `Joined`.
    pub fn registered(&self) -> BTreeSet<NodeId> {
        self.entries
            .iter()
            .filter(|(_, (_, e))| *e == EventKind::Joined)
            .map(|(j, _)| *j)
            .collect()
    }

    pub fn is_registered(&self, j: NodeId) -> bool {
        matches!(self.entries.get(&j), Some((_, EventKind::Joined)))
    }

    pub fn get(&self, j: NodeId) -> Option<(u64, EventKind)> {
        self.entries.get(&j).copied()
    }

    /// Records `(counter, event)` for `j` unless an entry with a counter at
    /// least as large is already present. Returns whether the entry changed.
    pub fn update(&mut self, j: NodeId, counter: u64, event: EventKind) -> bool {
        match self.entries.get(&j) {
            Some((stored, _)) if *stored >= counter => false,
            _ => {
                self.entries.insert(j, (counter, event));
                true
            }
        }
    }

    pub fn merge(&mut self, other: &Registry) {
        for (j, (c, e)) in &other.entries {
            self.update(*j, *c, *e);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, u64, EventKind)> + '_ {
        self.entries.iter().map(|(j, (c, e))| (*j, *c, *e))
    }

    fn keys(&self) -> impl Iterator<Item = &NodeId> {
        self.entries.keys()
    }
}

/// Highest round in which each node is known to have been active.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActivityTable {
    latest: BTreeMap<NodeId, u64>,
}

impl ActivityTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Raises the entry for `j` to `round`; entries never decrease.
    pub fn update(&mut self, j: NodeId, round: u64) {
        let slot = self.latest.entry(j).or_insert(0);
        *slot = (*slot).max(round);
    }

    pub fn get(&self, j: NodeId) -> Option<u64> {
        self.latest.get(&j).copied()
    }

    /// Current-round estimate: the largest recorded round, 0 when empty.
    pub fn estimate_round(&self) -> u64 {
        self.latest.values().copied().max().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &ActivityTable) {
        for (j, k) in &other.latest {
            self.update(*j, *k);
        }
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, u64)> + '_ {
        self.latest.iter().map(|(j, k)| (*j, *k))
    }
}

/// Byte costs used to account a serialized view entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewEntrySize {
    pub node_id: usize,
    pub counter: usize,
    pub event: usize,
    pub round: usize,
}

impl Default for ViewEntrySize {
    fn default() -> Self {
        Self {
            node_id: NodeId::ENCODED_LEN,
            counter: 8,
            event: 1,
            round: 8,
        }
    }
}

impl ViewEntrySize {
    pub fn per_entry(&self) -> usize {
        self.node_id + self.counter + self.event + self.round
    }
}

/// Registry plus activity table: the gossip payload.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct View {
    pub registry: Registry,
    pub activity: ActivityTable,
}

impl View {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge(&mut self, other: &View) {
        self.registry.merge(&other.registry);
        self.activity.merge(&other.activity);
    }

    /// Registered nodes active within the window, i.e. with a recorded round
    /// strictly greater than `round - window`. Returned in `NodeId` order.
    pub fn candidates(&self, round: u64, window: u64) -> Vec<NodeId> {
        debug_assert!(window >= 1);
        // activity > round - window, evaluated without underflow
        self.activity
            .iter()
            .filter(|(j, k)| k + window > round && self.registry.is_registered(*j))
            .map(|(j, _)| j)
            .collect()
    }

    /// Handles `joined(j, counter)`. The activity refresh happens even when
    /// the registry rejects a stale counter.
    pub fn handle_joined(&mut self, j: NodeId, counter: u64) {
        self.handle_event(j, counter, EventKind::Joined);
    }

    pub fn handle_left(&mut self, j: NodeId, counter: u64) {
        self.handle_event(j, counter, EventKind::Left);
    }

    fn handle_event(&mut self, j: NodeId, counter: u64, event: EventKind) {
        self.registry.update(j, counter, event);
        let estimate = self.activity.estimate_round();
        self.activity.update(j, estimate);
    }

    /// Number of distinct nodes mentioned by either table.
    pub fn entry_count(&self) -> usize {
        let mut n = self.registry.len();
        for (j, _) in self.activity.iter() {
            if self.registry.get(j).is_none() {
                n += 1;
            }
        }
        n
    }

    pub fn wire_size(&self, sizes: &ViewEntrySize) -> usize {
        self.entry_count() * sizes.per_entry()
    }

    pub fn knows(&self, j: NodeId) -> bool {
        self.registry.is_registered(j)
    }

    pub fn nodes(&self) -> BTreeSet<NodeId> {
        self.registry
            .keys()
            .copied()
            .chain(self.activity.iter().map(|(j, _)| j))
            .collect()
    }
}

/// Outbound membership announcement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Announcement {
    pub to: NodeId,
    pub node: NodeId,
    pub counter: u64,
    pub event: EventKind,
}

/// Local state that survives restarts: identity, persistent event counter
/// and the bootstrap peers used to advertise joins and leaves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalIdentity {
    pub self_id: NodeId,
    pub persistent_counter: u64,
    pub bootstrap_peers: Vec<NodeId>,
}

impl LocalIdentity {
    pub fn new(self_id: NodeId, bootstrap_peers: Vec<NodeId>) -> Self {
        Self {
            self_id,
            persistent_counter: 0,
            bootstrap_peers,
        }
    }

    pub fn request_join(&mut self, view: &mut View) -> Vec<Announcement> {
        self.announce(view, EventKind::Joined)
    }

    pub fn request_leave(&mut self, view: &mut View) -> Vec<Announcement> {
        self.announce(view, EventKind::Left)
    }

    fn announce(&mut self, view: &mut View, event: EventKind) -> Vec<Announcement> {
        self.persistent_counter += 1;
        let counter = self.persistent_counter;
        view.registry.update(self.self_id, counter, event);
        if event == EventKind::Joined {
            view.activity.update(self.self_id, 0);
        }
        self.bootstrap_peers
            .iter()
            .map(|&to| Announcement {
                to,
                node: self.self_id,
                counter,
                event,
            })
            .collect()
    }
}

/// Whether a node that has been silent since its last activation should
/// advertise itself again: true iff `now - last > window * mean_gap`, where
/// `mean_gap` is the arithmetic mean of the gaps between consecutive
/// activation timestamps. Needs at least two timestamps.
pub fn auto_rejoin_due(activation_times: &[u64], window: u64, now: u64) -> bool {
    if activation_times.len() < 2 {
        return false;
    }
    let first = activation_times[0];
    let last = *activation_times.last().unwrap();
    let gaps = (activation_times.len() - 1) as f64;
    let mean_gap = last.saturating_sub(first) as f64 / gaps;
    let silent = now.saturating_sub(last) as f64;
    silent > window as f64 * mean_gap
}

/// One activation of a node: the time it became active and the round it
/// was active in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Activation {
    pub time: u64,
    pub round: u64,
}

/// Round-normalized variant of [`auto_rejoin_due`]: the per-round duration
/// is estimated as elapsed time over elapsed rounds between the first and
/// last activation, so nodes that are only sampled every few rounds still
/// measure the duration of a single round.
pub fn mean_round_duration(activations: &[Activation]) -> Option<f64> {
    let first = activations.first()?;
    let last = activations.last()?;
    let rounds = last.round.checked_sub(first.round)?;
    if rounds == 0 {
        return None;
    }
    Some(last.time.saturating_sub(first.time) as f64 / rounds as f64)
}

pub fn rejoin_deadline(last_activation: u64, window: u64, round_duration: f64) -> u64 {
    last_activation + (window as f64 * round_duration).ceil() as u64
}
