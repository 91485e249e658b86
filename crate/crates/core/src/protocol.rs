//! Per-node train/aggregate state machine.
//!
//! The state machine is pure: it consumes `train` / `aggregate` messages and
//! training completions, and tells the caller what to do next (start or
//! cancel a training task, sample the next trainers or aggregators). The
//! caller owns sampling and message delivery.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::membership::{NodeId, View};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("cannot aggregate an empty set of models")]
    NoModels,
    #[error("model dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("success fraction must satisfy 0.5 < sf <= 1 (got {0})")]
    SuccessFraction(f64),
    #[error("need 1 <= aggregators <= sample size (got a = {aggregators}, s = {sample_size})")]
    Aggregators {
        aggregators: usize,
        sample_size: usize,
    },
    #[error("sample size must be at least 1")]
    SampleSize,
    #[error("activity window must be at least 1")]
    ActivityWindow,
}

/// Flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    params: Vec<f64>,
    bytes_per_param: usize,
}

impl Model {
    pub const DEFAULT_BYTES_PER_PARAM: usize = 4;

    pub fn new(params: Vec<f64>) -> Self {
        Self {
            params,
            bytes_per_param: Self::DEFAULT_BYTES_PER_PARAM,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn with_bytes_per_param(mut self, bytes: usize) -> Self {
        self.bytes_per_param = bytes;
        self
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn bytes_per_param(&self) -> usize {
        self.bytes_per_param
    }

    /// Accounted transfer size.
    pub fn byte_size(&self) -> usize {
        self.params.len() * self.bytes_per_param
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn distance(&self, other: &Model) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Unweighted elementwise mean, summed in the order given.
pub fn aggregate_models<'a, I>(models: I) -> Result<Model, ProtocolError>
where
    I: IntoIterator<Item = &'a Model>,
{
    let mut iter = models.into_iter();
    let first = iter.next().ok_or(ProtocolError::NoModels)?;
    let mut sum = first.params.clone();
    let mut count = 1usize;
    for m in iter {
        if m.dim() != sum.len() {
            return Err(ProtocolError::DimensionMismatch {
                expected: sum.len(),
                got: m.dim(),
            });
        }
        for (s, p) in sum.iter_mut().zip(&m.params) {
            *s += p;
        }
        count += 1;
    }
    let scale = count as f64;
    for s in &mut sum {
        *s /= scale;
    }
    Ok(Model {
        params: sum,
        bytes_per_param: first.bytes_per_param,
    })
}

/// Protocol parameters shared by every node of a session.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Trainers per sample (`s`).
    pub sample_size: usize,
    /// Aggregators per round (`a`).
    pub aggregators: usize,
    /// Fraction of the sample an aggregator waits for (`sf`).
    pub success_fraction: f64,
    /// Ping timeout (`Δt`), in simulation microseconds.
    pub ping_timeout: u64,
    /// Activity window (`Δk`), in rounds.
    pub activity_window: u64,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.sample_size == 0 {
            return Err(ProtocolError::SampleSize);
        }
        if !(self.success_fraction > 0.5 && self.success_fraction <= 1.0) {
            return Err(ProtocolError::SuccessFraction(self.success_fraction));
        }
        if self.aggregators == 0 || self.aggregators > self.sample_size {
            return Err(ProtocolError::Aggregators {
                aggregators: self.aggregators,
                sample_size: self.sample_size,
            });
        }
        if self.activity_window == 0 {
            return Err(ProtocolError::ActivityWindow);
        }
        Ok(())
    }

    /// Models an aggregator needs: `ceil(sf * s)`.
    pub fn threshold(&self) -> usize {
        let raw = self.success_fraction * self.sample_size as f64;
        // absorb representation error such as 0.9 * 10 = 9.000000000000002
        ((raw - 1e-9).ceil() as usize).clamp(1, self.sample_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMsg {
    pub round: u64,
    pub model: Arc<Model>,
    pub view: Arc<View>,
    pub sender: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateMsg {
    pub round: u64,
    pub model: Arc<Model>,
    pub view: Arc<View>,
    pub sender: NodeId,
}

/// What an aggregate message led to.
#[derive(Clone, Debug, PartialEq)]
pub enum AggregateOutcome {
    /// Older than the current aggregation round.
    Stale,
    /// Stored; `first` is set when this opened a new aggregation round.
    Accumulated {
        round: u64,
        first: bool,
        held: usize,
    },
    /// Enough models: sample `S^round` and send it the average.
    Ready {
        round: u64,
        model: Model,
        contributors: usize,
    },
}

/// What a train message led to.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainOutcome {
    /// Older than the current training round.
    Stale,
    /// Training for this round was already started (fast-path duplicate).
    Duplicate,
    /// Start training on `model`; `cancelled` names the round of an
    /// interrupted task, if any.
    Start {
        round: u64,
        model: Arc<Model>,
        cancelled: Option<u64>,
    },
}

/// Train/aggregate bookkeeping of one node.
#[derive(Clone, Debug)]
pub struct ProtocolState {
    config: ProtocolConfig,
    pending_models: BTreeMap<NodeId, Arc<Model>>,
    k_agg: u64,
    k_train: u64,
    training: Option<u64>,
    last_started: u64,
}

impl ProtocolState {
    pub fn new(config: ProtocolConfig) -> Self {
        Self {
            config,
            pending_models: BTreeMap::new(),
            k_agg: 0,
            k_train: 0,
            training: None,
            last_started: 0,
        }
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn aggregation_round(&self) -> u64 {
        self.k_agg
    }

    pub fn training_round(&self) -> u64 {
        self.k_train
    }

    pub fn pending_training(&self) -> Option<u64> {
        self.training
    }

    pub fn pending_models(&self) -> usize {
        self.pending_models.len()
    }

    /// Handles `aggregate(k, model, view)` from `msg.sender`.
    ///
    /// The view merge and the node's own activity update happen for every
    /// message, stale or not.
    pub fn on_aggregate(
        &mut self,
        me: NodeId,
        view: &mut View,
        msg: &AggregateMsg,
    ) -> AggregateOutcome {
        view.merge(&msg.view);
        view.activity.update(me, msg.round);
        let first = match msg.round.cmp(&self.k_agg) {
            std::cmp::Ordering::Less => return AggregateOutcome::Stale,
            std::cmp::Ordering::Greater => {
                self.k_agg = msg.round;
                self.pending_models.clear();
                true
            }
            std::cmp::Ordering::Equal => self.pending_models.is_empty(),
        };
        self.pending_models
            .insert(msg.sender, Arc::clone(&msg.model));
        if self.pending_models.len() >= self.config.threshold() {
            self.aggregate_pending()
        } else {
            AggregateOutcome::Accumulated {
                round: self.k_agg,
                first,
                held: self.pending_models.len(),
            }
        }
    }

    /// Aggregates whatever is held for the current round, regardless of the
    /// threshold. Used by the optional straggler timeout.
    pub fn force_aggregate(&mut self, round: u64) -> Option<AggregateOutcome> {
        if round != self.k_agg || self.pending_models.is_empty() {
            return None;
        }
        Some(self.aggregate_pending())
    }

    fn aggregate_pending(&mut self) -> AggregateOutcome {
        let contributors = self.pending_models.len();
        let model = aggregate_models(self.pending_models.values().map(|m| m.as_ref()))
            .expect("pending models share the session dimension");
        self.pending_models.clear();
        AggregateOutcome::Ready {
            round: self.k_agg,
            model,
            contributors,
        }
    }

    /// Handles `train(k, model, view)`.
    ///
    /// A node trains at most once per round: later copies of the same
    /// round's model (from slower aggregators) are dropped even after the
    /// first training run has finished.
    pub fn on_train(&mut self, me: NodeId, view: &mut View, msg: &TrainMsg) -> TrainOutcome {
        view.merge(&msg.view);
        view.activity.update(me, msg.round);
        let mut cancelled = None;
        if msg.round > self.k_train {
            self.k_train = msg.round;
            cancelled = self.training.take();
        }
        if msg.round < self.k_train {
            return TrainOutcome::Stale;
        }
        if self.training.is_some() || self.last_started >= msg.round {
            return TrainOutcome::Duplicate;
        }
        self.training = Some(msg.round);
        self.last_started = msg.round;
        TrainOutcome::Start {
            round: msg.round,
            model: Arc::clone(&msg.model),
            cancelled,
        }
    }

    /// Reports that the training task for `round` finished. Returns the
    /// round whose aggregators must receive the result, or `None` when the
    /// task had been cancelled in the meantime.
    pub fn on_training_complete(&mut self, round: u64) -> Option<u64> {
        if self.training == Some(round) && round == self.k_train {
            self.training = None;
            Some(round + 1)
        } else {
            None
        }
    }

    /// Drops volatile state, as after a crash.
    pub fn reset_volatile(&mut self) {
        self.pending_models.clear();
        self.training = None;
    }
}

/// Self-addressed `train(1, init, view)` for members of the first sample.
pub fn bootstrap_first_sample(
    node: NodeId,
    first_sample: &[NodeId],
    init_model: &Arc<Model>,
    view: &View,
) -> Option<TrainMsg> {
    first_sample.contains(&node).then(|| TrainMsg {
        round: 1,
        model: Arc::clone(init_model),
        view: Arc::new(view.clone()),
        sender: node,
    })
}

/// Model transfers of one failure-free round: every trainer pushes to every
/// aggregator, and every aggregator that completed sends to the sample.
pub fn round_transfer_count(s: usize, a: usize, completed_aggregators: usize) -> usize {
    s * a + completed_aggregators * s
}
