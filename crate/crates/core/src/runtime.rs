//! Event-driven runtime for the sampling-based protocol on top of `simnet`.
//!
//! Every node owns a view, a train/aggregate state machine and a set of open
//! sample requests. Trainers ping the head of the next round's ranking to
//! find live aggregators, aggregators ping the head of the same ranking to
//! find the next trainers, and views ride along with every model.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;

use crate::learning::{local_train, LearningError, Metrics};
use crate::membership::{mean_round_duration, Activation, LocalIdentity, NodeId, View};
use crate::metrics::{Bytes, PropagationTrace, RoundTrace, RunReport, StallReport, TimelinePoint};
use crate::protocol::{
    bootstrap_first_sample, AggregateMsg, AggregateOutcome, Model, ProtocolConfig, ProtocolState,
    TrainMsg, TrainOutcome,
};
use crate::rng;
use crate::sampling::{retry_backoff, RankedCandidates, SampleRequest, SampleStep};
use crate::scenario::{Scenario, WireSizes};
use crate::simnet::{
    ComputeId, Event, FaultAction, FaultKind, NodeState, Payload, Simulator, Time, TimerId,
};

#[derive(Clone, Debug, PartialEq)]
pub enum Msg {
    Ping { round: u64 },
    Pong { round: u64 },
    Joined { node: NodeId, counter: u64 },
    Left { node: NodeId, counter: u64 },
    Train(TrainMsg),
    Aggregate(AggregateMsg),
}

/// A message with its accounted size.
#[derive(Clone, Debug, PartialEq)]
pub struct Wire {
    pub msg: Msg,
    bytes: Bytes,
}

impl Wire {
    pub fn new(msg: Msg, sizes: &WireSizes, view_bytes: u64) -> Self {
        let bytes = match &msg {
            Msg::Ping { .. } => Bytes::overhead(sizes.ping),
            Msg::Pong { .. } => Bytes::overhead(sizes.pong),
            Msg::Joined { .. } | Msg::Left { .. } => Bytes::overhead(sizes.membership),
            Msg::Train(TrainMsg { model, .. }) | Msg::Aggregate(AggregateMsg { model, .. }) => {
                Bytes {
                    model: model.dim() as u64 * sizes.bytes_per_param,
                    overhead: sizes.header + view_bytes,
                }
            }
        };
        Self { msg, bytes }
    }
}

impl Payload for Wire {
    fn bytes(&self) -> Bytes {
        self.bytes
    }

    fn kind(&self) -> &'static str {
        match self.msg {
            Msg::Ping { .. } => "ping",
            Msg::Pong { .. } => "pong",
            Msg::Joined { .. } => "joined",
            Msg::Left { .. } => "left",
            Msg::Train(_) => "train",
            Msg::Aggregate(_) => "aggregate",
        }
    }

    fn round(&self) -> u64 {
        match &self.msg {
            Msg::Ping { round } | Msg::Pong { round } => *round,
            Msg::Joined { .. } | Msg::Left { .. } => 0,
            Msg::Train(m) => m.round,
            Msg::Aggregate(m) => m.round,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tm {
    PingTimeout { req: u64, generation: u64 },
    Retry { req: u64 },
    Straggler { round: u64 },
    RejoinCheck,
    Train { round: u64 },
}

#[derive(Clone, Debug)]
enum Purpose {
    /// Aggregator looking for the trainers of `round`.
    Trainers(Arc<Model>),
    /// Trainer looking for the aggregators of `round`.
    Aggregators(Arc<Model>),
}

#[derive(Clone, Debug)]
struct Req {
    purpose: Purpose,
    round: u64,
    size: usize,
    sample: SampleRequest,
    attempt: u32,
    started: Time,
    timer: Option<TimerId>,
    waiting_retry: bool,
}

#[derive(Clone, Debug)]
struct Node {
    member: bool,
    view: View,
    ident: LocalIdentity,
    proto: ProtocolState,
    requests: BTreeMap<u64, Req>,
    training: Option<(u64, ComputeId)>,
    straggler: Option<TimerId>,
    /// Last round this node aggregated; late models for it are not flushed again.
    aggregated: u64,
    rejoin_timer: Option<TimerId>,
    /// First and latest activation.
    activations: Vec<Activation>,
    last_refresh: Time,
}

impl Node {
    fn new(id: NodeId, cfg: ProtocolConfig) -> Self {
        Self {
            member: false,
            view: View::new(),
            ident: LocalIdentity::new(id, Vec::new()),
            proto: ProtocolState::new(cfg),
            requests: BTreeMap::new(),
            training: None,
            straggler: None,
            aggregated: 0,
            rejoin_timer: None,
            activations: Vec::new(),
            last_refresh: 0,
        }
    }

    fn obsolete(&self, purpose: &Purpose, round: u64) -> bool {
        let kt = self.proto.training_round();
        let ka = self.proto.aggregation_round();
        match purpose {
            Purpose::Trainers(_) => kt > round || ka > round,
            Purpose::Aggregators(_) => kt >= round || ka > round,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stop {
    MaxRounds,
    Target,
    Horizon,
    Stalled,
    Failed,
}

struct Runtime<'a> {
    sc: &'a Scenario,
    cfg: ProtocolConfig,
    sim: Simulator<Wire, Tm>,
    nodes: Vec<Node>,
    ever_member: Vec<bool>,
    jobs: BTreeMap<(NodeId, u64), Arc<Model>>,
    results: BTreeMap<(NodeId, u64), Result<Model, LearningError>>,
    rounds: BTreeMap<u64, RoundTrace>,
    timeline: Vec<TimelinePoint>,
    trajectory: Vec<(u64, Model)>,
    mismatches: usize,
    /// Highest round whose trainer sample was started anywhere.
    top_round: u64,
    last_progress: Time,
    propagation: Vec<PropagationTrace>,
    pre_existing: Vec<Vec<NodeId>>,
    next_req: u64,
    stop: Option<Stop>,
    stall: Option<StallReport>,
    error: Option<String>,
}

/// Runs the protocol for `sc` and collects the report.
pub fn run(sc: &Scenario) -> RunReport {
    let mut rt = Runtime::new(sc);
    rt.bootstrap();
    rt.main_loop();
    rt.finish()
}

impl<'a> Runtime<'a> {
    fn new(sc: &'a Scenario) -> Self {
        let cfg = sc.protocol;
        let mut sim = Simulator::new(sc.latency.clone(), sc.initial_nodes());
        sim.schedule_faults(&sc.config.faults);
        let nodes = (0..sc.total_nodes)
            .map(|i| Node::new(NodeId(i as u64), cfg))
            .collect();
        Self {
            sc,
            cfg,
            sim,
            nodes,
            ever_member: vec![false; sc.total_nodes],
            jobs: BTreeMap::new(),
            results: BTreeMap::new(),
            rounds: BTreeMap::new(),
            timeline: Vec::new(),
            trajectory: Vec::new(),
            mismatches: 0,
            top_round: 1,
            last_progress: 0,
            propagation: Vec::new(),
            pre_existing: Vec::new(),
            next_req: 0,
            stop: None,
            stall: None,
            error: None,
        }
    }

    fn now(&self) -> Time {
        self.sim.now()
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: Msg, view_bytes: u64) {
        let w = Wire::new(msg, &self.sc.config.wire, view_bytes);
        self.sim.send(from, to, w);
    }

    fn view_snapshot(&self, me: NodeId) -> (Arc<View>, u64) {
        let v = &self.nodes[me.index()].view;
        let bytes = v.wire_size(&self.sc.config.wire.view_entry) as u64;
        (Arc::new(v.clone()), bytes)
    }

    fn bootstrap(&mut self) {
        let n = self.sc.initial_nodes();
        let mut view = View::new();
        for i in 0..n as u64 {
            view.registry
                .update(NodeId(i), 1, crate::membership::EventKind::Joined);
            view.activity.update(NodeId(i), 0);
        }
        for i in 0..n {
            let me = NodeId(i as u64);
            let peers = self.pick_peers(me, (0..n as u64).map(NodeId).collect(), 0);
            let node = &mut self.nodes[i];
            node.member = true;
            node.view = view.clone();
            node.ident = LocalIdentity {
                self_id: me,
                persistent_counter: 1,
                bootstrap_peers: peers,
            };
            node.activations = vec![Activation { time: 0, round: 0 }];
            self.ever_member[i] = true;
        }
        let first =
            RankedCandidates::rank(self.candidates(NodeId(0), 1), 1).head(self.cfg.sample_size);
        self.rounds.insert(
            1,
            RoundTrace {
                round: 1,
                start: 0,
                sample_duration: Some(0),
                trainers: first.clone(),
                ..Default::default()
            },
        );
        let init = Arc::new(self.sc.task.init_model(self.sc.config.seed));
        for i in 0..n {
            let me = NodeId(i as u64);
            if self.sc.auto_rejoin {
                self.arm_rejoin(me);
            }
            if let Some(msg) = bootstrap_first_sample(me, &first, &init, &self.nodes[i].view) {
                self.on_train(me, &msg);
            }
        }
    }

    /// `count` distinct peers from `pool` other than `me`, seeded by the
    /// node's event counter.
    fn pick_peers(&self, me: NodeId, pool: Vec<NodeId>, counter: u64) -> Vec<NodeId> {
        let pool: Vec<NodeId> = pool.into_iter().filter(|&j| j != me).collect();
        let mut r = rng::stream(self.sc.config.seed, &[rng::tag::BOOTSTRAP, me.0, counter]);
        let mut peers: Vec<NodeId> = pool
            .choose_multiple(&mut r, self.cfg.sample_size)
            .copied()
            .collect();
        peers.sort_unstable();
        peers
    }

    fn candidates(&self, me: NodeId, round: u64) -> Vec<NodeId> {
        let mut c = self.nodes[me.index()]
            .view
            .candidates(round, self.cfg.activity_window);
        if let Some(f) = self.sc.fixed_aggregator {
            c.retain(|&j| j != f);
        }
        c
    }

    fn main_loop(&mut self) {
        while self.stop.is_none() {
            let Some((t, ev)) = self.sim.step() else {
                self.declare_stall(self.now(), "event queue drained before the run finished");
                break;
            };
            if let Some(h) = self.sc.horizon {
                if t > h {
                    self.stop = Some(Stop::Horizon);
                    break;
                }
            }
            if t > self.last_progress + self.sc.stall_window {
                let at = self.last_progress + self.sc.stall_window;
                self.declare_stall(at, "no round advanced within the stall window");
                break;
            }
            match ev {
                Event::Message { from, to, msg } => self.on_message(from, to, msg.msg),
                Event::Timer { node, payload, .. } => self.on_timer(node, payload),
                Event::Compute { node, payload, .. } => {
                    if let Tm::Train { round } = payload {
                        self.on_trained(node, round);
                    }
                }
                Event::Fault(action) => self.on_fault(action),
            }
        }
    }

    fn declare_stall(&mut self, at: Time, reason: &str) {
        let mut stalled = Vec::new();
        let mut live = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            let me = NodeId(i as u64);
            if !(node.member && self.sim.is_up(me)) {
                continue;
            }
            live += 1;
            for req in node.requests.values().filter(|r| r.waiting_retry) {
                let live_candidates = self
                    .candidates(me, req.round)
                    .into_iter()
                    .filter(|&j| self.sim.is_up(j))
                    .count();
                stalled.push((me, req.round, live_candidates));
            }
        }
        self.stall = Some(StallReport {
            time: at,
            last_round: self.top_round - 1,
            live_nodes: live,
            stalled_requests: stalled,
            reason: reason.to_string(),
        });
        self.stop = Some(Stop::Stalled);
    }

    fn on_message(&mut self, from: NodeId, to: NodeId, msg: Msg) {
        if !self.nodes[to.index()].member {
            return;
        }
        match msg {
            Msg::Ping { round } => self.send(to, from, Msg::Pong { round }, 0),
            Msg::Pong { round } => self.on_pong(to, from, round),
            Msg::Joined { node, counter } => {
                self.nodes[to.index()].view.handle_joined(node, counter);
                self.observe(to);
            }
            Msg::Left { node, counter } => {
                self.nodes[to.index()].view.handle_left(node, counter);
            }
            Msg::Train(m) => self.on_train(to, &m),
            Msg::Aggregate(m) => self.on_aggregate(to, &m),
        }
    }

    fn on_pong(&mut self, me: NodeId, from: NodeId, round: u64) {
        let ids: Vec<u64> = self.nodes[me.index()]
            .requests
            .iter()
            .filter(|(_, r)| !r.waiting_retry && r.round == round && r.sample.was_pinged(from))
            .map(|(&id, _)| id)
            .collect();
        for id in ids {
            let Some(req) = self.nodes[me.index()].requests.get_mut(&id) else {
                continue;
            };
            let step = req.sample.on_pong(from);
            self.handle_step(me, id, step);
        }
    }

    fn begin_request(&mut self, me: NodeId, purpose: Purpose, round: u64, size: usize) {
        let ranked = RankedCandidates::rank(self.candidates(me, round), round);
        let (sample, step) = SampleRequest::begin(&ranked, size);
        let id = self.next_req;
        self.next_req += 1;
        let started = self.now();
        self.nodes[me.index()].requests.insert(
            id,
            Req {
                purpose,
                round,
                size,
                sample,
                attempt: 0,
                started,
                timer: None,
                waiting_retry: false,
            },
        );
        self.handle_step(me, id, step);
    }

    fn handle_step(&mut self, me: NodeId, id: u64, step: SampleStep) {
        let dt = self.cfg.ping_timeout;
        match step {
            SampleStep::Waiting => {}
            SampleStep::Ping(targets) => {
                let req = &self.nodes[me.index()].requests[&id];
                let round = req.round;
                let generation = req.sample.generation();
                let old = req.timer;
                for t in targets {
                    self.send(me, t, Msg::Ping { round }, 0);
                }
                if let Some(t) = old {
                    self.sim.cancel_timer(t);
                }
                let timer = self.sim.set_timer(
                    me,
                    dt,
                    Tm::PingTimeout {
                        req: id,
                        generation,
                    },
                );
                if let Some(req) = self.nodes[me.index()].requests.get_mut(&id) {
                    req.timer = Some(timer);
                }
            }
            SampleStep::Complete(members) => {
                let req = self.nodes[me.index()]
                    .requests
                    .remove(&id)
                    .expect("completed request is open");
                if let Some(t) = req.timer {
                    self.sim.cancel_timer(t);
                }
                self.dispatch(me, req, members);
            }
            SampleStep::Stalled => {
                let node = &mut self.nodes[me.index()];
                let req = &node.requests[&id];
                let obsolete = node.obsolete(&req.purpose, req.round);
                let delay = retry_backoff(req.attempt, dt);
                let old = node.requests.get_mut(&id).expect("open").timer.take();
                if let Some(t) = old {
                    self.sim.cancel_timer(t);
                }
                if obsolete {
                    self.nodes[me.index()].requests.remove(&id);
                    return;
                }
                let timer = self.sim.set_timer(me, delay, Tm::Retry { req: id });
                let req = self.nodes[me.index()].requests.get_mut(&id).expect("open");
                req.attempt += 1;
                req.waiting_retry = true;
                req.timer = Some(timer);
            }
        }
    }

    fn dispatch(&mut self, me: NodeId, req: Req, members: Vec<NodeId>) {
        let now = self.now();
        let (view, view_bytes) = self.view_snapshot(me);
        match req.purpose {
            Purpose::Trainers(model) => {
                let trace = self.rounds.entry(req.round).or_insert_with(|| RoundTrace {
                    round: req.round,
                    start: req.started,
                    ..Default::default()
                });
                if trace.sample_duration.is_none() {
                    trace.sample_duration = Some(now - req.started);
                    trace.trainers = members.clone();
                }
                for m in members {
                    let msg = TrainMsg {
                        round: req.round,
                        model: Arc::clone(&model),
                        view: Arc::clone(&view),
                        sender: me,
                    };
                    self.send(me, m, Msg::Train(msg), view_bytes);
                }
            }
            Purpose::Aggregators(model) => {
                for m in members {
                    let msg = AggregateMsg {
                        round: req.round,
                        model: Arc::clone(&model),
                        view: Arc::clone(&view),
                        sender: me,
                    };
                    self.send(me, m, Msg::Aggregate(msg), view_bytes);
                }
            }
        }
    }

    fn record_activation(&mut self, me: NodeId, round: u64) {
        let now = self.now();
        let node = &mut self.nodes[me.index()];
        node.last_refresh = now;
        let act = Activation { time: now, round };
        match node.activations.len() {
            0 | 1 => {
                if node.activations.last().is_none_or(|a| a.round < round) {
                    node.activations.push(act);
                }
            }
            _ => {
                if node.activations[1].round < round {
                    node.activations[1] = act;
                }
            }
        }
    }

    fn on_train(&mut self, me: NodeId, msg: &TrainMsg) {
        let node = &mut self.nodes[me.index()];
        let outcome = node.proto.on_train(me, &mut node.view, msg);
        self.observe(me);
        let TrainOutcome::Start { round, model, .. } = outcome else {
            return;
        };
        if let Some((old, id)) = self.nodes[me.index()].training.take() {
            self.sim.cancel_compute(id);
            self.jobs.remove(&(me, old));
            self.results.remove(&(me, old));
        }
        self.record_activation(me, round);
        let d = self
            .sc
            .config
            .compute
            .sample(self.sc.config.seed, me, round);
        let id = self.sim.schedule_compute(me, d, Tm::Train { round });
        self.nodes[me.index()].training = Some((round, id));
        self.jobs.insert((me, round), model);
    }

    /// Result of the training job `(me, round)`. All registered jobs are
    /// computed together so independent trainers run in parallel.
    fn take_result(&mut self, me: NodeId, round: u64) -> Result<Model, LearningError> {
        if let Some(r) = self.results.remove(&(me, round)) {
            return r;
        }
        let jobs: Vec<((NodeId, u64), Arc<Model>)> =
            std::mem::take(&mut self.jobs).into_iter().collect();
        let task = &self.sc.task;
        let trainer = &self.sc.trainer;
        let out = self.sc.exec().map(&jobs, |((j, r), model)| {
            local_train(
                &task.objective,
                model,
                &task.datasets[j.index()],
                &trainer.for_round(*j, *r),
            )
        });
        for ((key, _), res) in jobs.iter().zip(out) {
            self.results.insert(*key, res);
        }
        self.results
            .remove(&(me, round))
            .expect("training job registered at start")
    }

    fn on_trained(&mut self, me: NodeId, round: u64) {
        let node = &mut self.nodes[me.index()];
        if node.training.is_some_and(|(r, _)| r == round) {
            node.training = None;
        }
        let Some(next) = node.proto.on_training_complete(round) else {
            self.jobs.remove(&(me, round));
            self.results.remove(&(me, round));
            return;
        };
        let model = match self.take_result(me, round) {
            Ok(m) => Arc::new(m),
            Err(e) => {
                self.error = Some(format!("{me} round {round}: {e}"));
                self.stop = Some(Stop::Failed);
                return;
            }
        };
        match self.sc.fixed_aggregator {
            Some(f) => {
                let (view, view_bytes) = self.view_snapshot(me);
                let msg = AggregateMsg {
                    round: next,
                    model,
                    view,
                    sender: me,
                };
                self.send(me, f, Msg::Aggregate(msg), view_bytes);
            }
            None => {
                let a = self.cfg.aggregators;
                self.begin_request(me, Purpose::Aggregators(model), next, a);
            }
        }
    }

    fn on_aggregate(&mut self, me: NodeId, msg: &AggregateMsg) {
        let node = &mut self.nodes[me.index()];
        let outcome = node.proto.on_aggregate(me, &mut node.view, msg);
        self.observe(me);
        match outcome {
            AggregateOutcome::Stale => {}
            AggregateOutcome::Accumulated { round, first, .. } => {
                self.record_activation(me, round);
                let fresh = round > self.nodes[me.index()].aggregated;
                if let (true, true, Some(t)) = (first, fresh, self.sc.straggler_timeout) {
                    if let Some(old) = self.nodes[me.index()].straggler.take() {
                        self.sim.cancel_timer(old);
                    }
                    let id = self.sim.set_timer(me, t, Tm::Straggler { round });
                    self.nodes[me.index()].straggler = Some(id);
                }
            }
            AggregateOutcome::Ready { round, model, .. } => {
                self.record_activation(me, round);
                self.on_aggregated(me, round, model);
            }
        }
    }

    fn on_aggregated(&mut self, me: NodeId, k: u64, model: Model) {
        self.nodes[me.index()].aggregated = k;
        if let Some(t) = self.nodes[me.index()].straggler.take() {
            self.sim.cancel_timer(t);
        }
        let now = self.now();
        let r = k - 1;
        self.rounds
            .entry(r)
            .or_insert_with(|| RoundTrace {
                round: r,
                ..Default::default()
            })
            .completed_aggregators += 1;
        if k > self.top_round {
            self.top_round = k;
            self.last_progress = now;
            let dead_candidates = self.dead_candidates(k);
            let trace = self.rounds.entry(k).or_insert_with(|| RoundTrace {
                round: k,
                start: now,
                ..Default::default()
            });
            trace.dead_candidates = dead_candidates;
            let max_rounds = self.sc.config.max_rounds;
            let mut metrics: Option<Metrics> = None;
            if r.is_multiple_of(self.sc.config.eval_every) || r >= max_rounds {
                let m = self.sc.task.evaluate(&model, self.sc.exec());
                self.timeline.push(TimelinePoint {
                    time: now,
                    round: r,
                    loss: m.loss,
                    score: m.score(),
                    score_std: None,
                });
                metrics = Some(m);
            }
            let trace = self.rounds.get_mut(&r).expect("inserted above");
            trace.end = Some(now);
            trace.metrics = metrics;
            if self.sc.config.record_models {
                self.trajectory.push((r, model.clone()));
            }
            if r >= max_rounds {
                self.stop = Some(Stop::MaxRounds);
            } else if self.sc.config.stop_at_target
                && metrics.is_some_and(|m| self.sc.task.target.reached(&m))
            {
                self.stop = Some(Stop::Target);
            }
        } else if self.sc.config.record_models {
            let first = self.trajectory.iter().rev().find(|(rr, _)| *rr == r);
            if first.is_some_and(|(_, m)| *m != model) {
                self.mismatches += 1;
            }
        }
        let s = self.cfg.sample_size;
        self.begin_request(me, Purpose::Trainers(Arc::new(model)), k, s);
    }

    fn dead_candidates(&self, round: u64) -> usize {
        let live = self.live_members();
        live.iter()
            .map(|&i| {
                self.candidates(i, round)
                    .into_iter()
                    .filter(|&j| self.sim.state(j) == NodeState::Down)
                    .count()
            })
            .sum()
    }

    fn on_timer(&mut self, me: NodeId, tm: Tm) {
        match tm {
            Tm::PingTimeout { req, generation } => {
                let Some(r) = self.nodes[me.index()].requests.get_mut(&req) else {
                    return;
                };
                r.timer = None;
                let step = r.sample.on_timeout(generation);
                self.handle_step(me, req, step);
            }
            Tm::Retry { req } => {
                let node = &mut self.nodes[me.index()];
                let Some(r) = node.requests.get(&req) else {
                    return;
                };
                if node.obsolete(&r.purpose, r.round) {
                    node.requests.remove(&req);
                    return;
                }
                let (round, size) = (r.round, r.size);
                let ranked = RankedCandidates::rank(self.candidates(me, round), round);
                let (sample, step) = SampleRequest::begin(&ranked, size);
                let r = self.nodes[me.index()].requests.get_mut(&req).expect("open");
                r.sample = sample;
                r.waiting_retry = false;
                r.timer = None;
                self.handle_step(me, req, step);
            }
            Tm::Straggler { round } => {
                self.nodes[me.index()].straggler = None;
                if let Some(AggregateOutcome::Ready { round, model, .. }) =
                    self.nodes[me.index()].proto.force_aggregate(round)
                {
                    self.on_aggregated(me, round, model);
                }
            }
            Tm::RejoinCheck => self.rejoin_check(me),
            Tm::Train { .. } => {}
        }
    }

    fn round_estimate(&self, me: NodeId) -> Time {
        mean_round_duration(&self.nodes[me.index()].activations)
            .map(|d| d.round() as Time)
            .filter(|&d| d > 0)
            .unwrap_or(self.sc.expected_round)
    }

    fn arm_rejoin(&mut self, me: NodeId) {
        let span = self.cfg.activity_window * self.round_estimate(me);
        let deadline = self.nodes[me.index()].last_refresh + span;
        let delay = deadline.saturating_sub(self.now()).max(1);
        let id = self.sim.set_timer(me, delay, Tm::RejoinCheck);
        self.nodes[me.index()].rejoin_timer = Some(id);
    }

    fn rejoin_check(&mut self, me: NodeId) {
        self.nodes[me.index()].rejoin_timer = None;
        if !self.nodes[me.index()].member {
            return;
        }
        let span = self.cfg.activity_window * self.round_estimate(me);
        if self.now() >= self.nodes[me.index()].last_refresh + span {
            self.advertise_join(me);
        }
        self.arm_rejoin(me);
    }

    /// Sends `joined` to fresh peers drawn from the node's own view.
    fn advertise_join(&mut self, me: NodeId) {
        let node = &self.nodes[me.index()];
        let est = node.view.activity.estimate_round();
        let mut pool = node.view.candidates(est.max(1), self.cfg.activity_window);
        pool.retain(|&j| j != me);
        if pool.len() < self.cfg.sample_size {
            pool = node.view.registry.registered().into_iter().collect();
        }
        let counter = node.ident.persistent_counter + 1;
        let peers = self.pick_peers(me, pool, counter);
        self.announce_join(me, peers);
    }

    fn announce_join(&mut self, me: NodeId, peers: Vec<NodeId>) {
        let now = self.now();
        let node = &mut self.nodes[me.index()];
        node.ident.bootstrap_peers = peers;
        let anns = node.ident.request_join(&mut node.view);
        node.last_refresh = now;
        for a in anns {
            self.send(
                me,
                a.to,
                Msg::Joined {
                    node: a.node,
                    counter: a.counter,
                },
                0,
            );
        }
    }

    fn live_members(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].member && self.sim.is_up(NodeId(i as u64)))
            .map(|i| NodeId(i as u64))
            .collect()
    }

    fn on_fault(&mut self, action: FaultAction) {
        let j = action.node;
        match action.kind {
            FaultKind::Join => {
                let members = self.live_members();
                let counter = self.nodes[j.index()].ident.persistent_counter + 1;
                let peers = self.pick_peers(j, members.clone(), counter);
                let now = self.now();
                let node = &mut self.nodes[j.index()];
                node.member = true;
                node.activations.clear();
                self.ever_member[j.index()] = true;
                let mut trace = PropagationTrace::new(j, now, self.top_round);
                trace.record_view_inclusion(j, now);
                self.propagation.push(trace);
                self.pre_existing.push(members);
                self.announce_join(j, peers);
                if self.sc.auto_rejoin {
                    self.arm_rejoin(j);
                }
            }
            FaultKind::Leave => {
                if !self.nodes[j.index()].member || !self.sim.is_up(j) {
                    return;
                }
                let node = &mut self.nodes[j.index()];
                let anns = node.ident.request_leave(&mut node.view);
                for a in anns {
                    self.send(
                        j,
                        a.to,
                        Msg::Left {
                            node: a.node,
                            counter: a.counter,
                        },
                        0,
                    );
                }
                self.sim.crash(j);
                self.drop_volatile(j);
            }
            FaultKind::Crash => {
                self.drop_volatile(j);
                self.check_propagation();
            }
            FaultKind::Recover => {
                if !self.ever_member[j.index()] {
                    return;
                }
                self.nodes[j.index()].member = true;
                let pool = self.nodes[j.index()]
                    .view
                    .registry
                    .registered()
                    .into_iter()
                    .collect();
                let counter = self.nodes[j.index()].ident.persistent_counter + 1;
                let peers = self.pick_peers(j, pool, counter);
                self.announce_join(j, peers);
                if self.sc.auto_rejoin {
                    self.arm_rejoin(j);
                }
            }
        }
    }

    fn drop_volatile(&mut self, j: NodeId) {
        let node = &mut self.nodes[j.index()];
        node.member = false;
        node.proto.reset_volatile();
        node.requests.clear();
        node.training = None;
        node.straggler = None;
        node.rejoin_timer = None;
        self.jobs.retain(|(n, _), _| *n != j);
        self.results.retain(|(n, _), _| *n != j);
    }

    /// Records whether `me`'s view now holds any joiner still propagating.
    fn observe(&mut self, me: NodeId) {
        if self.propagation.is_empty() {
            return;
        }
        let now = self.now();
        let mut changed = false;
        for p in self
            .propagation
            .iter_mut()
            .filter(|p| p.complete_time.is_none())
        {
            if !p.observers.contains_key(&me)
                && self.nodes[me.index()].view.registry.is_registered(p.joiner)
            {
                p.record_view_inclusion(me, now);
                changed = true;
            }
        }
        if changed {
            self.check_propagation();
        }
    }

    fn check_propagation(&mut self) {
        let now = self.now();
        for (p, pre) in self.propagation.iter_mut().zip(&self.pre_existing) {
            if p.complete_time.is_some() {
                continue;
            }
            let done = pre.iter().all(|&o| {
                !(self.nodes[o.index()].member && self.sim.is_up(o)) || p.observers.contains_key(&o)
            });
            if done {
                p.complete_time = Some(now);
                p.complete_round = Some(self.top_round);
            }
        }
    }

    fn finish(self) -> RunReport {
        let end_time = match &self.stall {
            Some(s) => s.time,
            None => self.sim.now(),
        };
        let participants = (0..self.nodes.len())
            .filter(|&i| self.ever_member[i])
            .map(|i| NodeId(i as u64))
            .collect();
        let nodes = self.sim.node_count();
        let (ledger, transfers, event_digest, events) = self.sim.into_parts();
        RunReport {
            method: "modest".into(),
            nodes,
            model_params: self.sc.task.objective.param_count(),
            target: Some(self.sc.task.target),
            ledger,
            transfers,
            rounds: self.rounds.into_values().collect(),
            timeline: self.timeline,
            propagation: self.propagation,
            event_digest,
            events,
            end_time,
            stall: self.stall,
            participants,
            trajectory: self.trajectory,
            trajectory_mismatches: self.mismatches,
            error: self.error,
        }
    }
}
