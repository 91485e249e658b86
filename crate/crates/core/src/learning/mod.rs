//! Local training and evaluation on synthetic tasks.

mod tasks;

pub use tasks::{
    make_task_linreg, make_task_softmax_blobs, partition, LinregSpec, PartitionScheme,
    PartitionSpec, SoftmaxSpec, Target, Task, TaskError, TaskSpec, ACCURACY_TARGET_SLACK,
    LINREG_TARGET_MARGIN,
};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::membership::NodeId;
use crate::par::{chunks, Exec};
use crate::protocol::Model;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum LearningError {
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite {
        loss: f64,
        epoch: usize,
        step: usize,
    },
    #[error("model has {got} parameters, task expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid trainer config: {0}")]
    Config(&'static str),
    #[error("local dataset of {0} is empty")]
    EmptyDataset(NodeId),
}

/// Examples stored row-major: `features[i * dim..(i + 1) * dim]` is example `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDataset {
    pub owner: NodeId,
    dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl LocalDataset {
    pub fn new(owner: NodeId, dim: usize) -> Self {
        Self {
            owner,
            dim,
            features: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn from_rows(owner: NodeId, dim: usize, rows: &[(Vec<f64>, f64)]) -> Self {
        let mut d = Self::new(owner, dim);
        for (x, y) in rows {
            d.push(x, *y);
        }
        d
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        assert_eq!(x.len(), self.dim, "feature dimension is fixed per dataset");
        self.features.extend_from_slice(x);
        self.targets.push(y);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Concatenates several datasets.
    pub fn union<'a>(owner: NodeId, parts: impl IntoIterator<Item = &'a LocalDataset>) -> Self {
        let mut iter = parts.into_iter().peekable();
        let dim = iter.peek().map_or(0, |d| d.dim);
        let mut out = Self::new(owner, dim);
        for p in iter {
            out.features.extend_from_slice(&p.features);
            out.targets.extend_from_slice(&p.targets);
        }
        out
    }
}

/// Loss family of a task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    /// Squared error `(w·x - y)^2`, no bias.
    Linreg { dim: usize },
    /// Multinomial logistic regression; parameters are the `classes x dim`
    /// weight matrix followed by `classes` biases.
    Softmax { classes: usize, dim: usize },
}

impl Objective {
    pub fn param_count(&self) -> usize {
        match *self {
            Objective::Linreg { dim } => dim,
            Objective::Softmax { classes, dim } => classes * (dim + 1),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Objective::Softmax { .. })
    }

    /// Seeded initial model shared by every node of a session.
    pub fn init_model(&self, seed: u64) -> Model {
        let mut r = rng::stream(seed, &[rng::tag::INIT_MODEL]);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        Model::new(
            (0..self.param_count())
                .map(|_| normal.sample(&mut r))
                .collect(),
        )
    }

    /// Loss of one example; accumulates its gradient into `grad` scaled by
    /// `scale` when given.
    fn example(&self, params: &[f64], x: &[f64], y: f64, grad: Option<(&mut [f64], f64)>) -> f64 {
        match *self {
            Objective::Linreg { .. } => {
                let r = dot(params, x) - y;
                if let Some((g, scale)) = grad {
                    let c = 2.0 * r * scale;
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += c * xi;
                    }
                }
                r * r
            }
            Objective::Softmax { classes, dim } => {
                let label = y as usize;
                let (w, b) = params.split_at(classes * dim);
                let mut logits: Vec<f64> = (0..classes)
                    .map(|c| dot(&w[c * dim..(c + 1) * dim], x) + b[c])
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in &mut logits {
                    *l = (*l - max).exp();
                    z += *l;
                }
                let loss = z.ln() - (logits[label].ln());
                if let Some((g, scale)) = grad {
                    let (gw, gb) = g.split_at_mut(classes * dim);
                    for c in 0..classes {
                        let p = logits[c] / z;
                        let d = (p - if c == label { 1.0 } else { 0.0 }) * scale;
                        for (gi, xi) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                            *gi += d * xi;
                        }
                        gb[c] += d;
                    }
                }
                loss
            }
        }
    }

    fn predict_class(&self, params: &[f64], x: &[f64]) -> usize {
        match *self {
            Objective::Linreg { .. } => 0,
            Objective::Softmax { classes, dim } => {
                let (w, b) = params.split_at(classes * dim);
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..classes {
                    let l = dot(&w[c * dim..(c + 1) * dim], x) + b[c];
                    if l > best.1 {
                        best = (c, l);
                    }
                }
                best.0
            }
        }
    }

    /// Mean loss over `batch`, writing its gradient into `grad`.
    pub fn loss_grad(
        &self,
        params: &[f64],
        data: &LocalDataset,
        batch: &[usize],
        grad: &mut [f64],
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            loss += self.example(params, data.x(i), data.y(i), Some((&mut *grad, scale)));
        }
        loss * scale
    }

    /// Mean loss over `batch`.
    pub fn loss(&self, params: &[f64], data: &LocalDataset, batch: &[usize]) -> f64 {
        let sum: f64 = batch
            .iter()
            .map(|&i| self.example(params, data.x(i), data.y(i), None))
            .sum();
        sum / batch.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Heavy-ball coefficient; 0 disables momentum.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 20,
            local_epochs: 1,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LearningError::Config(
                "learning rate must be finite and >= 0",
            ));
        }
        if self.batch_size == 0 {
            return Err(LearningError::Config("batch size must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(LearningError::Config("local epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LearningError::Config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Copy with the shuffling seed of `node` in `round`.
    pub fn for_round(&self, node: NodeId, round: u64) -> Self {
        Self {
            seed: rng::derive(self.seed, &[rng::tag::TRAIN, node.0, round]),
            ..*self
        }
    }
}

/// Runs `E` epochs of mini-batch SGD over `data` starting from `model`.
pub fn local_train(
    objective: &Objective,
    model: &Model,
    data: &LocalDataset,
    cfg: &TrainerConfig,
) -> Result<Model, LearningError> {
    if model.dim() != objective.param_count() {
        return Err(LearningError::Dimension {
            expected: objective.param_count(),
            got: model.dim(),
        });
    }
    if data.is_empty() {
        return Err(LearningError::EmptyDataset(data.owner));
    }
    let mut out = model.clone();
    let params = out.params_mut();
    let mut grad = vec![0.0; params.len()];
    let mut velocity = if cfg.momentum > 0.0 {
        vec![0.0; params.len()]
    } else {
        Vec::new()
    };
    let mut r = rng::stream(cfg.seed, &[]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut r);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let loss = objective.loss_grad(params, data, batch, &mut grad);
            if !loss.is_finite() {
                return Err(LearningError::NonFinite { loss, epoch, step });
            }
            if velocity.is_empty() {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= cfg.learning_rate * g;
                }
            } else {
                for ((p, g), v) in params.iter_mut().zip(&grad).zip(&mut velocity) {
                    *v = cfg.momentum * *v + g;
                    *p -= cfg.learning_rate * *v;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Classification accuracy; `None` for regression, where `loss` is the MSE.
    pub accuracy: Option<f64>,
}

impl Metrics {
    /// Accuracy for classification, MSE otherwise.
    pub fn score(&self) -> f64 {
        self.accuracy.unwrap_or(self.loss)
    }
}

const EVAL_CHUNK: usize = 256;

/// Loss and accuracy on a held-out set.
pub fn evaluate(objective: &Objective, model: &Model, test: &LocalDataset, exec: Exec) -> Metrics {
    if test.is_empty() {
        return Metrics {
            loss: 0.0,
            accuracy: objective.is_classification().then_some(0.0),
        };
    }
    let params = model.params();
    let ranges = chunks(test.len(), EVAL_CHUNK);
    let partial = exec.map(&ranges, |r| {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in r.clone() {
            loss += objective.example(params, test.x(i), test.y(i), None);
            if objective.is_classification()
                && objective.predict_class(params, test.x(i)) == test.y(i) as usize
            {
                correct += 1;
            }
        }
        (loss, correct)
    });
    let (loss, correct) = partial
        .iter()
        .fold((0.0, 0usize), |(l, c), (pl, pc)| (l + pl, c + pc));
    let n = test.len() as f64;
    Metrics {
        loss: loss / n,
        accuracy: objective.is_classification().then_some(correct as f64 / n),
    }
}
