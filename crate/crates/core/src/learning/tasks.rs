//! Synthetic task generators and data partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{evaluate, local_train, LocalDataset, Metrics, Objective, TrainerConfig};
use crate::membership::NodeId;
use crate::par::Exec;
use crate::protocol::Model;
use crate::rng::{self, SimRng};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub nodes: usize,
    pub seed: u64,
}

/// Assigns example indices to nodes. `labels[i]` is the group used for label
/// skew under the Dirichlet scheme. Every node receives at least one example
/// as long as there are at least as many examples as nodes.
pub fn partition(labels: &[usize], spec: &PartitionSpec) -> Vec<Vec<usize>> {
    let n = spec.nodes;
    let mut r = rng::stream(spec.seed, &[rng::tag::PARTITION]);
    let mut parts = vec![Vec::new(); n];
    match spec.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(&mut r);
            for (k, i) in idx.into_iter().enumerate() {
                parts[k % n].push(i);
            }
        }
        PartitionScheme::Dirichlet { alpha } => {
            let groups = labels.iter().max().map_or(0, |m| m + 1);
            let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
            for g in 0..groups {
                let mut members: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == g).collect();
                members.shuffle(&mut r);
                let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut r)).collect();
                let total: f64 = w.iter().sum();
                if total > 0.0 {
                    w.iter_mut().for_each(|x| *x /= total);
                } else {
                    w = vec![1.0 / n as f64; n];
                }
                let mut cum = 0.0;
                let mut start = 0;
                for (node, p) in w.iter().enumerate() {
                    cum += p;
                    let end = if node + 1 == n {
                        members.len()
                    } else {
                        ((cum * members.len() as f64).round() as usize).min(members.len())
                    };
                    parts[node].extend_from_slice(&members[start..end.max(start)]);
                    start = end.max(start);
                }
            }
            // refill empty nodes from the currently largest one
            for node in 0..n {
                if parts[node].is_empty() {
                    let donor = (0..n)
                        .max_by_key(|&j| (parts[j].len(), std::cmp::Reverse(j)))
                        .expect("n >= 1");
                    if parts[donor].len() > 1 {
                        let moved = parts[donor].pop().expect("non-empty donor");
                        parts[node].push(moved);
                    }
                }
            }
            for p in &mut parts {
                p.sort_unstable();
            }
        }
    }
    parts
}

/// What a run must reach on the test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Target {
    LossBelow(f64),
    AccuracyAtLeast(f64),
}

impl Target {
    pub fn reached(&self, m: &Metrics) -> bool {
        match *self {
            Target::LossBelow(t) => m.loss <= t,
            Target::AccuracyAtLeast(t) => m.accuracy.is_some_and(|a| a >= t),
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Target::LossBelow(t) | Target::AccuracyAtLeast(t) => t,
        }
    }
}

/// A generated task: one dataset per node plus a shared test set.
#[derive(Clone, Debug)]
pub struct Task {
    pub objective: Objective,
    pub datasets: Vec<LocalDataset>,
    pub test: LocalDataset,
    pub target: Target,
    /// Cluster or class label of every example, per node.
    pub labels: Vec<Vec<usize>>,
}

impl Task {
    pub fn init_model(&self, seed: u64) -> Model {
        self.objective.init_model(seed)
    }

    pub fn evaluate(&self, model: &Model, exec: Exec) -> Metrics {
        evaluate(&self.objective, model, &self.test, exec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinregSpec {
    pub dim: usize,
    pub samples_per_node: usize,
    pub noise: f64,
    /// Feature clusters; the Dirichlet scheme skews nodes over clusters.
    pub clusters: usize,
    pub test_size: usize,
}

impl Default for LinregSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            samples_per_node: 40,
            noise: 0.5,
            clusters: 10,
            test_size: 1000,
        }
    }
}

pub const LINREG_TARGET_MARGIN: f64 = 0.1;

/// Planted linear model `y = w*·x + noise`.
pub fn make_task_linreg(
    spec: &LinregSpec,
    n_nodes: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Task, TaskError> {
    if spec.dim == 0 {
        return Err(TaskError::Invalid("linreg dimension must be >= 1"));
    }
    if spec.clusters == 0 || spec.samples_per_node == 0 || n_nodes == 0 {
        return Err(TaskError::Invalid(
            "clusters, samples per node and nodes must be >= 1",
        ));
    }
    if spec.noise.is_nan() || spec.noise < 0.0 {
        return Err(TaskError::Invalid("noise must be >= 0"));
    }
    let mut r = rng::stream(seed, &[rng::tag::TASK]);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let w_star: Vec<f64> = (0..spec.dim).map(|_| std.sample(&mut r)).collect();
    let centers: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| (0..spec.dim).map(|_| std.sample(&mut r)).collect())
        .collect();
    let draw = |r: &mut SimRng| {
        let c = r.random_range(0..spec.clusters);
        let x: Vec<f64> = centers[c].iter().map(|m| m + std.sample(r)).collect();
        let y: f64 =
            x.iter().zip(&w_star).map(|(a, b)| a * b).sum::<f64>() + spec.noise * std.sample(r);
        (x, y, c)
    };
    let total = n_nodes * spec.samples_per_node;
    let corpus: Vec<(Vec<f64>, f64, usize)> = (0..total).map(|_| draw(&mut r)).collect();
    let test_rows: Vec<(Vec<f64>, f64)> = (0..spec.test_size)
        .map(|_| {
            let (x, y, _) = draw(&mut r);
            (x, y)
        })
        .collect();
    let (datasets, labels) = split(&corpus, spec.dim, n_nodes, scheme, seed);
    Ok(Task {
        objective: Objective::Linreg { dim: spec.dim },
        datasets,
        test: LocalDataset::from_rows(NodeId(u64::MAX), spec.dim, &test_rows),
        target: Target::LossBelow(spec.noise * spec.noise * (1.0 + LINREG_TARGET_MARGIN)),
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftmaxSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_node: usize,
    /// Standard deviation of the class centers; larger separates classes.
    pub separation: f64,
    pub test_size: usize,
    /// Epochs of centralized SGD used to calibrate the target accuracy.
    pub calibration_epochs: usize,
}

impl Default for SoftmaxSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 20,
            samples_per_node: 40,
            separation: 1.0,
            test_size: 1000,
            calibration_epochs: 5,
        }
    }
}

pub const ACCURACY_TARGET_SLACK: f64 = 0.02;

/// Gaussian class blobs. The target accuracy is that of centralized SGD on
/// the union of all node data, minus two points.
pub fn make_task_softmax_blobs(
    spec: &SoftmaxSpec,
    n_nodes: usize,
    scheme: PartitionScheme,
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<Task, TaskError> {
    if spec.classes < 2 {
        return Err(TaskError::Invalid("softmax task needs at least 2 classes"));
    }
    if spec.dim == 0 || spec.samples_per_node == 0 || n_nodes == 0 {
        return Err(TaskError::Invalid(
            "dimension, samples per node and nodes must be >= 1",
        ));
    }
    let mut r = rng::stream(seed, &[rng::tag::TASK]);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.separation * std.sample(&mut r))
                .collect()
        })
        .collect();
    let draw = |r: &mut SimRng| {
        let c = r.random_range(0..spec.classes);
        let x: Vec<f64> = centers[c].iter().map(|m| m + std.sample(r)).collect();
        (x, c as f64, c)
    };
    let total = n_nodes * spec.samples_per_node;
    let corpus: Vec<(Vec<f64>, f64, usize)> = (0..total).map(|_| draw(&mut r)).collect();
    let test_rows: Vec<(Vec<f64>, f64)> = (0..spec.test_size)
        .map(|_| {
            let (x, y, _) = draw(&mut r);
            (x, y)
        })
        .collect();
    let (datasets, labels) = split(&corpus, spec.dim, n_nodes, scheme, seed);
    let objective = Objective::Softmax {
        classes: spec.classes,
        dim: spec.dim,
    };
    let test = LocalDataset::from_rows(NodeId(u64::MAX), spec.dim, &test_rows);
    let mut target = Target::AccuracyAtLeast(0.0);
    if spec.calibration_epochs > 0 {
        let all = LocalDataset::union(NodeId(u64::MAX), &datasets);
        let cfg = TrainerConfig {
            local_epochs: spec.calibration_epochs,
            seed: rng::derive(seed, &[rng::tag::TASK, 1]),
            ..*trainer
        };
        let central = local_train(&objective, &objective.init_model(seed), &all, &cfg)
            .map_err(|_| TaskError::Invalid("centralized calibration diverged"))?;
        let acc = evaluate(&objective, &central, &test, Exec::Parallel)
            .accuracy
            .unwrap_or(0.0);
        target = Target::AccuracyAtLeast((acc - ACCURACY_TARGET_SLACK).max(0.0));
    }
    Ok(Task {
        objective,
        datasets,
        test,
        target,
        labels,
    })
}

fn split(
    corpus: &[(Vec<f64>, f64, usize)],
    dim: usize,
    n_nodes: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> (Vec<LocalDataset>, Vec<Vec<usize>>) {
    let groups: Vec<usize> = corpus.iter().map(|e| e.2).collect();
    let parts = partition(
        &groups,
        &PartitionSpec {
            scheme,
            nodes: n_nodes,
            seed,
        },
    );
    let mut datasets = Vec::with_capacity(n_nodes);
    let mut labels = Vec::with_capacity(n_nodes);
    for (node, idx) in parts.iter().enumerate() {
        let mut d = LocalDataset::new(NodeId(node as u64), dim);
        let mut l = Vec::with_capacity(idx.len());
        for &i in idx {
            d.push(&corpus[i].0, corpus[i].1);
            l.push(corpus[i].2);
        }
        datasets.push(d);
        labels.push(l);
    }
    (datasets, labels)
}

/// Task selection from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum TaskSpec {
    Linreg(LinregSpec),
    Softmax(SoftmaxSpec),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Linreg(LinregSpec::default())
    }
}

impl TaskSpec {
    pub fn build(
        &self,
        n_nodes: usize,
        scheme: PartitionScheme,
        trainer: &TrainerConfig,
        seed: u64,
    ) -> Result<Task, TaskError> {
        match self {
            TaskSpec::Linreg(s) => make_task_linreg(s, n_nodes, scheme, seed),
            TaskSpec::Softmax(s) => make_task_softmax_blobs(s, n_nodes, scheme, trainer, seed),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TaskSpec::Linreg(s) => s.dim,
            TaskSpec::Softmax(s) => s.classes * (s.dim + 1),
        }
    }
}
