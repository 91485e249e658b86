//! Reference methods run on the same simulator, tasks and byte accounting:
//! server-based federated averaging and gossip-free decentralized SGD over a
//! one-peer exponential graph.

use crate::learning::{local_train, LearningError, Metrics};
use crate::membership::NodeId;
use crate::metrics::{Bytes, RoundTrace, RunReport, StallReport, TimelinePoint};
use crate::protocol::{aggregate_models, Model};
use crate::scenario::Scenario;
use crate::simnet::{Payload, Time};

/// A model transfer; contents live in the runner, the simulator only needs sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub kind: &'static str,
    pub round: u64,
    pub bytes: Bytes,
}

impl Transfer {
    fn model(sc: &Scenario, kind: &'static str, round: u64) -> Self {
        let w = &sc.config.wire;
        Self {
            kind,
            round,
            bytes: Bytes {
                model: sc.task.objective.param_count() as u64 * w.bytes_per_param,
                overhead: w.header,
            },
        }
    }
}

impl Payload for Transfer {
    fn bytes(&self) -> Bytes {
        self.bytes
    }

    fn kind(&self) -> &'static str {
        self.kind
    }

    fn round(&self) -> u64 {
        self.round
    }
}

fn stall_report(at: Time, last_round: u64, live: usize, reason: &str) -> StallReport {
    StallReport {
        time: at,
        last_round,
        live_nodes: live,
        stalled_requests: Vec::new(),
        reason: reason.to_string(),
    }
}

/// Mean Euclidean distance of each model to the average model.
pub fn consensus_distance(models: &[Model]) -> f64 {
    if models.is_empty() {
        return 0.0;
    }
    let mean = aggregate_models(models.iter()).expect("non-empty, equal dimensions");
    models.iter().map(|m| m.distance(&mean)).sum::<f64>() / models.len() as f64
}

pub mod fedavg {
    use std::collections::BTreeMap;

    use super::*;
    use crate::sampling::RankedCandidates;
    use crate::simnet::{Event, Simulator};

    #[derive(Clone, Debug, PartialEq)]
    pub enum Tm {
        Train { round: u64 },
        Deadline { round: u64 },
    }

    /// Clients of `round`: the first `s` of the round's hash ranking.
    pub fn clients_for_round(clients: &[NodeId], round: u64, s: usize) -> Vec<NodeId> {
        RankedCandidates::rank(clients.iter().copied(), round).head(s)
    }

    /// Runs federated averaging. The most central node acts as the server and
    /// does not train; every round it sends the global model to `s` clients
    /// and averages what comes back.
    pub fn run(sc: &Scenario) -> RunReport {
        let n = sc.initial_nodes();
        let all: Vec<NodeId> = (0..n as u64).map(NodeId).collect();
        let server = sc.latency.most_central(&all).expect("at least two nodes");
        let clients: Vec<NodeId> = all.iter().copied().filter(|&j| j != server).collect();
        let s = sc.config.sample_size.min(clients.len());
        let mut sim: Simulator<Transfer, Tm> = Simulator::new(sc.latency.clone(), n);
        sim.schedule_faults(&sc.config.faults);

        let mut global = sc.task.init_model(sc.config.seed);
        let mut rounds = Vec::new();
        let mut timeline = Vec::new();
        let mut trajectory = Vec::new();
        let mut stall = None;
        let mut error = None;
        let mut trained: BTreeMap<NodeId, Result<Model, LearningError>> = BTreeMap::new();
        let mut received: BTreeMap<NodeId, Model> = BTreeMap::new();
        let mut selected: Vec<NodeId> = Vec::new();
        let mut round = 0u64;
        let mut round_start: Time = 0;

        let start_round =
            |sim: &mut Simulator<Transfer, Tm>,
             round: u64,
             global: &Model,
             selected: &mut Vec<NodeId>,
             trained: &mut BTreeMap<NodeId, Result<Model, LearningError>>| {
                *selected = clients_for_round(&clients, round, s);
                let task = &sc.task;
                let out = sc.exec().map(selected, |&c| {
                    local_train(
                        &task.objective,
                        global,
                        &task.datasets[c.index()],
                        &sc.trainer.for_round(c, round),
                    )
                });
                trained.clear();
                trained.extend(selected.iter().copied().zip(out));
                for &c in selected.iter() {
                    sim.send(server, c, Transfer::model(sc, "global", round));
                }
                sim.set_timer(server, sc.stall_window, Tm::Deadline { round });
            };

        round += 1;
        start_round(&mut sim, round, &global, &mut selected, &mut trained);
        loop {
            let Some((t, ev)) = sim.step() else {
                stall = Some(stall_report(
                    sim.now(),
                    round - 1,
                    sim.live_nodes().len(),
                    "event queue drained before the run finished",
                ));
                break;
            };
            if sc.horizon.is_some_and(|h| t > h) {
                break;
            }
            let mut close = false;
            match ev {
                Event::Message { from, to, msg } => {
                    if msg.round != round {
                        continue;
                    }
                    if to == server {
                        if let Some(Ok(m)) = trained.get(&from) {
                            received.insert(from, m.clone());
                        }
                        close = received.len() == selected.len();
                    } else {
                        let d = sc.config.compute.sample(sc.config.seed, to, round);
                        sim.schedule_compute(to, d, Tm::Train { round });
                    }
                }
                Event::Compute {
                    node,
                    payload: Tm::Train { round: r },
                    ..
                } if r == round => match &trained[&node] {
                    Ok(_) => sim.send(node, server, Transfer::model(sc, "update", round)),
                    Err(e) => {
                        error = Some(format!("{node} round {round}: {e}"));
                        break;
                    }
                },
                Event::Timer {
                    payload: Tm::Deadline { round: r },
                    ..
                } if r == round => {
                    if received.is_empty() {
                        stall = Some(stall_report(
                            t,
                            round - 1,
                            sim.live_nodes().len(),
                            "no client update arrived within the stall window",
                        ));
                        break;
                    }
                    close = true;
                }
                _ => {}
            }
            if !close {
                continue;
            }
            global = aggregate_models(received.values()).expect("non-empty");
            received.clear();
            let mut trace = RoundTrace {
                round,
                start: round_start,
                end: Some(t),
                sample_duration: Some(0),
                completed_aggregators: 1,
                trainers: selected.clone(),
                metrics: None,
                dead_candidates: 0,
            };
            let mut reached = false;
            if round.is_multiple_of(sc.config.eval_every) || round >= sc.config.max_rounds {
                let m = sc.task.evaluate(&global, sc.exec());
                timeline.push(TimelinePoint {
                    time: t,
                    round,
                    loss: m.loss,
                    score: m.score(),
                    score_std: None,
                });
                reached = sc.task.target.reached(&m);
                trace.metrics = Some(m);
            }
            rounds.push(trace);
            if sc.config.record_models {
                trajectory.push((round, global.clone()));
            }
            if round >= sc.config.max_rounds || (sc.config.stop_at_target && reached) {
                break;
            }
            round += 1;
            round_start = t;
            start_round(&mut sim, round, &global, &mut selected, &mut trained);
        }

        let end_time = stall.as_ref().map_or(sim.now(), |s: &StallReport| s.time);
        let (ledger, transfers, event_digest, events) = sim.into_parts();
        RunReport {
            method: "fedavg".into(),
            nodes: n,
            model_params: sc.task.objective.param_count(),
            target: Some(sc.task.target),
            ledger,
            transfers,
            rounds,
            timeline,
            event_digest,
            events,
            end_time,
            stall,
            participants: all,
            trajectory,
            error,
            ..Default::default()
        }
    }
}

pub mod dsgd {
    use super::*;
    use crate::simnet::{Event, Simulator};

    /// One-peer exponential graph: in round `r` node `i` sends to
    /// `(i + 2^m) mod n`, cycling `m` over the distinct non-zero offsets.
    #[derive(Clone, Debug, PartialEq, Eq)]
    pub struct ExponentialGraphSchedule {
        n: usize,
        offsets: Vec<usize>,
    }

    impl ExponentialGraphSchedule {
        pub fn new(n: usize) -> Self {
            let mut offsets = Vec::new();
            let mut p = 1usize;
            while p < n {
                let o = p % n;
                if o != 0 && !offsets.contains(&o) {
                    offsets.push(o);
                }
                p *= 2;
            }
            if offsets.is_empty() && n > 1 {
                offsets.push(1);
            }
            Self { n, offsets }
        }

        pub fn offsets(&self) -> &[usize] {
            &self.offsets
        }

        pub fn offset(&self, round: u64) -> usize {
            self.offsets[(round.saturating_sub(1) as usize) % self.offsets.len()]
        }

        pub fn peer(&self, i: NodeId, round: u64) -> NodeId {
            NodeId(((i.index() + self.offset(round)) % self.n) as u64)
        }
    }

    #[derive(Clone, Debug, PartialEq)]
    pub enum Tm {
        Train { round: u64 },
    }

    /// Mean and standard deviation of per-node metrics.
    pub fn summarize(metrics: &[Metrics]) -> (f64, f64, f64) {
        let k = metrics.len().max(1) as f64;
        let loss = metrics.iter().map(|m| m.loss).sum::<f64>() / k;
        let score = metrics.iter().map(|m| m.score()).sum::<f64>() / k;
        let var = metrics
            .iter()
            .map(|m| (m.score() - score).powi(2))
            .sum::<f64>()
            / k;
        (loss, score, var.sqrt())
    }

    /// Runs decentralized SGD: every node trains each round, sends its model
    /// to one peer and averages with the model it receives. Rounds are
    /// separated by a global barrier.
    pub fn run(sc: &Scenario) -> RunReport {
        let n = sc.initial_nodes();
        let all: Vec<NodeId> = (0..n as u64).map(NodeId).collect();
        let graph = ExponentialGraphSchedule::new(n);
        let mut sim: Simulator<Transfer, Tm> = Simulator::new(sc.latency.clone(), n);
        sim.schedule_faults(&sc.config.faults);

        let init = sc.task.init_model(sc.config.seed);
        let mut models: Vec<Model> = vec![init; n];
        let mut trained: Vec<Option<Model>> = vec![None; n];
        let mut incoming: Vec<Option<NodeId>> = vec![None; n];
        let mut own_done = vec![false; n];
        let mut done = 0usize;
        let mut rounds = Vec::new();
        let mut timeline = Vec::new();
        let mut stall = None;
        let mut error = None;
        let mut round = 1u64;
        let mut round_start: Time = 0;

        let start_round = |sim: &mut Simulator<Transfer, Tm>,
                           round: u64,
                           models: &[Model],
                           trained: &mut Vec<Option<Model>>|
         -> Result<(), String> {
            let task = &sc.task;
            let out = sc.exec().map_range(n, |i| {
                let j = NodeId(i as u64);
                local_train(
                    &task.objective,
                    &models[i],
                    &task.datasets[i],
                    &sc.trainer.for_round(j, round),
                )
            });
            for (i, r) in out.into_iter().enumerate() {
                match r {
                    Ok(m) => trained[i] = Some(m),
                    Err(e) => return Err(format!("{} round {round}: {e}", NodeId(i as u64))),
                }
            }
            for i in 0..n {
                let j = NodeId(i as u64);
                let d = sc.config.compute.sample(sc.config.seed, j, round);
                sim.schedule_compute(j, d, Tm::Train { round });
            }
            Ok(())
        };

        if let Err(e) = start_round(&mut sim, round, &models, &mut trained) {
            error = Some(e);
        }
        while error.is_none() {
            let Some((t, ev)) = sim.step() else {
                stall = Some(stall_report(
                    sim.now(),
                    round - 1,
                    sim.live_nodes().len(),
                    "event queue drained before the barrier completed",
                ));
                break;
            };
            if sc.horizon.is_some_and(|h| t > h) {
                break;
            }
            let finished =
                |i: usize, own: &[bool], inc: &[Option<NodeId>]| own[i] && inc[i].is_some();
            match ev {
                Event::Compute {
                    node,
                    payload: Tm::Train { round: r },
                    ..
                } if r == round => {
                    let i = node.index();
                    own_done[i] = true;
                    sim.send(
                        node,
                        graph.peer(node, round),
                        Transfer::model(sc, "model", round),
                    );
                    if finished(i, &own_done, &incoming) {
                        done += 1;
                    }
                }
                Event::Message { from, to, msg } if msg.round == round => {
                    let i = to.index();
                    incoming[i] = Some(from);
                    if finished(i, &own_done, &incoming) {
                        done += 1;
                    }
                }
                _ => {}
            }
            if done < n {
                continue;
            }
            for i in 0..n {
                let own = trained[i].as_ref().expect("trained");
                let other = trained[incoming[i].expect("received").index()]
                    .as_ref()
                    .expect("trained");
                models[i] = aggregate_models([own, other]).expect("equal dimensions");
            }
            let mut trace = RoundTrace {
                round,
                start: round_start,
                end: Some(t),
                sample_duration: Some(0),
                completed_aggregators: n,
                trainers: all.clone(),
                metrics: None,
                dead_candidates: 0,
            };
            let mut reached = false;
            if round.is_multiple_of(sc.config.eval_every) || round >= sc.config.max_rounds {
                let per_node: Vec<Metrics> = models
                    .iter()
                    .map(|m| sc.task.evaluate(m, sc.exec()))
                    .collect();
                let (loss, score, std) = summarize(&per_node);
                timeline.push(TimelinePoint {
                    time: t,
                    round,
                    loss,
                    score,
                    score_std: Some(std),
                });
                let mean = Metrics {
                    loss,
                    accuracy: per_node[0].accuracy.map(|_| score),
                };
                reached = sc.task.target.reached(&mean);
                trace.metrics = Some(mean);
            }
            rounds.push(trace);
            if round >= sc.config.max_rounds || (sc.config.stop_at_target && reached) {
                break;
            }
            round += 1;
            round_start = t;
            done = 0;
            own_done.iter_mut().for_each(|d| *d = false);
            incoming.iter_mut().for_each(|d| *d = None);
            if let Err(e) = start_round(&mut sim, round, &models, &mut trained) {
                error = Some(e);
            }
        }

        let end_time = stall.as_ref().map_or(sim.now(), |s: &StallReport| s.time);
        let (ledger, transfers, event_digest, events) = sim.into_parts();
        RunReport {
            method: "dsgd".into(),
            nodes: n,
            model_params: sc.task.objective.param_count(),
            target: Some(sc.task.target),
            ledger,
            transfers,
            rounds,
            timeline,
            event_digest,
            events,
            end_time,
            stall,
            participants: all,
            error,
            ..Default::default()
        }
    }
}
