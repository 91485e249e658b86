//! Per-round ranking of candidates and the ping/pong state machine that
//! turns a ranking into a sample of live nodes.
//!
//! Every node ranks its candidates for round `k` by `digest(node, k)`. Nodes
//! with equal candidate sets therefore contact candidates in the same order
//! and, when liveness outcomes agree, end up with the same sample. The head
//! of the ranking is pinged in parallel; missing answers are replaced one at
//! a time from the tail, each with a fresh timeout.

use std::collections::BTreeMap;

use crate::membership::NodeId;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the canonical id bytes followed by the big-endian
/// round, passed through the murmur3 `fmix64` finalizer for avalanche.
pub fn digest(node: NodeId, round: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in node.to_bytes().iter().chain(round.to_be_bytes().iter()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    fmix64(h)
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Candidates of one round sorted by digest, ties broken by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedCandidates {
    round: u64,
    entries: Vec<(u64, NodeId)>,
}

impl RankedCandidates {
    pub fn rank<I>(candidates: I, round: u64) -> Self
    where
        I: IntoIterator<Item = NodeId>,
    {
        let mut entries: Vec<(u64, NodeId)> = candidates
            .into_iter()
            .map(|j| (digest(j, round), j))
            .collect();
        entries.sort_unstable();
        entries.dedup();
        Self { round, entries }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, NodeId)] {
        &self.entries
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.iter().map(|(_, j)| *j)
    }

    pub fn head(&self, n: usize) -> Vec<NodeId> {
        self.nodes().take(n).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Waiting for the optimistic batch sent to the head of the ranking.
    Parallel,
    /// Probing the tail one candidate at a time.
    Sequential,
    Done,
}

/// Result of feeding an event into a [`SampleRequest`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SampleStep {
    /// Nothing to do until the next pong or timeout.
    Waiting,
    /// Ping these nodes and arm a fresh timeout for the current generation.
    Ping(Vec<NodeId>),
    /// The sample is complete; members are in rank order.
    Complete(Vec<NodeId>),
    /// The ranking was exhausted before enough nodes answered. The caller
    /// retries the whole procedure, possibly after a backoff.
    Stalled,
}

/// One in-flight sampling procedure for a single round.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    round: u64,
    target: usize,
    order: Vec<NodeId>,
    rank_of: BTreeMap<NodeId, usize>,
    answered: Vec<bool>,
    responders: usize,
    cursor: usize,
    awaiting: Option<usize>,
    phase: Phase,
    generation: u64,
}

impl SampleRequest {
    /// Starts a sample of `size` nodes and returns the first step, which
    /// pings `ranked.head(size)` (or stalls at once on an empty ranking).
    ///
    /// # Panics
    ///
    /// Panics if `size` is zero.
    pub fn begin(ranked: &RankedCandidates, size: usize) -> (Self, SampleStep) {
        assert!(size >= 1, "sample size must be at least 1");
        let order: Vec<NodeId> = ranked.nodes().collect();
        let rank_of = order.iter().enumerate().map(|(i, j)| (*j, i)).collect();
        let head = size.min(order.len());
        let mut req = Self {
            round: ranked.round(),
            target: size,
            answered: vec![false; order.len()],
            order,
            rank_of,
            responders: 0,
            cursor: head,
            awaiting: None,
            phase: Phase::Parallel,
            generation: 0,
        };
        if head == 0 {
            req.phase = Phase::Done;
            return (req, SampleStep::Stalled);
        }
        let pings = req.order[..head].to_vec();
        (req, SampleStep::Ping(pings))
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Generation of the currently armed timeout; timeouts tagged with an
    /// older generation are stale.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn responders(&self) -> usize {
        self.responders
    }

    pub fn pinged(&self) -> usize {
        self.cursor
    }

    pub fn was_pinged(&self, j: NodeId) -> bool {
        self.rank_of.get(&j).is_some_and(|r| *r < self.cursor)
    }

    pub fn on_pong(&mut self, from: NodeId) -> SampleStep {
        if self.phase == Phase::Done {
            return SampleStep::Waiting;
        }
        let Some(&rank) = self.rank_of.get(&from) else {
            return SampleStep::Waiting;
        };
        if rank >= self.cursor || self.answered[rank] {
            return SampleStep::Waiting;
        }
        self.answered[rank] = true;
        self.responders += 1;
        if self.responders == self.target {
            return self.complete();
        }
        match self.phase {
            Phase::Parallel => {
                // Every head node answered yet the head was short: the
                // ranking is smaller than the target.
                if self.cursor == self.order.len() && self.all_pinged_answered() {
                    self.phase = Phase::Done;
                    SampleStep::Stalled
                } else {
                    SampleStep::Waiting
                }
            }
            Phase::Sequential if self.awaiting == Some(rank) => self.ping_next(),
            _ => SampleStep::Waiting,
        }
    }

    /// Handles expiry of the timeout armed for `generation`.
    pub fn on_timeout(&mut self, generation: u64) -> SampleStep {
        if self.phase == Phase::Done || generation != self.generation {
            return SampleStep::Waiting;
        }
        self.phase = Phase::Sequential;
        self.ping_next()
    }

    fn ping_next(&mut self) -> SampleStep {
        if self.cursor >= self.order.len() {
            self.phase = Phase::Done;
            self.awaiting = None;
            return SampleStep::Stalled;
        }
        let rank = self.cursor;
        self.cursor += 1;
        self.awaiting = Some(rank);
        self.generation += 1;
        SampleStep::Ping(vec![self.order[rank]])
    }

    fn all_pinged_answered(&self) -> bool {
        self.answered[..self.cursor].iter().all(|a| *a)
    }

    fn complete(&mut self) -> SampleStep {
        self.phase = Phase::Done;
        self.awaiting = None;
        let members = self
            .order
            .iter()
            .zip(&self.answered)
            .filter(|(_, a)| **a)
            .map(|(j, _)| *j)
            .collect();
        SampleStep::Complete(members)
    }
}

/// Delay before retry number `attempt` (0-based) of a stalled sample:
/// `base * 2^attempt`, capped at `8 * base`.
pub fn retry_backoff(attempt: u32, base: u64) -> u64 {
    let factor = 1u64 << attempt.min(3);
    base.saturating_mul(factor)
}
