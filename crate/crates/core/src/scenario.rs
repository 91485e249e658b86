//! Declarative scenario configuration, defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines;
use crate::learning::{PartitionScheme, Task, TaskError, TaskSpec, TrainerConfig};
use crate::membership::{NodeId, ViewEntrySize};
use crate::metrics::RunReport;
use crate::par::Exec;
use crate::protocol::{ProtocolConfig, ProtocolError};
use crate::rng;
use crate::runtime;
use crate::simnet::{
    from_ms, ComputeModel, FaultSchedule, LatencyModel, LatencySpec, SimError, Time,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("task: {0}")]
    Task(#[from] TaskError),
    #[error("trainer: {0}")]
    Trainer(#[from] crate::learning::LearningError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Modest,
    Fedavg,
    Dsgd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Modest => "modest",
            Method::Fedavg => "fedavg",
            Method::Dsgd => "dsgd",
        }
    }
}

/// Accounted message sizes in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WireSizes {
    pub ping: u64,
    pub pong: u64,
    /// `joined` / `left` announcements.
    pub membership: u64,
    /// Fixed header of every model-carrying message.
    pub header: u64,
    pub bytes_per_param: u64,
    pub view_entry: ViewEntrySize,
}

impl Default for WireSizes {
    fn default() -> Self {
        Self {
            ping: 64,
            pong: 64,
            membership: 48,
            header: 32,
            bytes_per_param: 4,
            view_entry: ViewEntrySize::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModestOptions {
    /// Pin every round's aggregator to the most central node (FL emulation).
    /// Requires `aggregators = 1`.
    pub fixed_aggregator: bool,
    /// Aggregate whatever arrived this long after a round's first model.
    pub straggler_timeout_ms: Option<f64>,
    /// Disable the straggler timeout; aggregators then wait for the full threshold.
    pub no_straggler_timeout: bool,
    pub stall_window_ms: Option<f64>,
    /// Round duration assumed before a node has seen two activations.
    pub expected_round_ms: Option<f64>,
    /// Re-advertise after `activity_window` rounds without activation.
    pub auto_rejoin: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub method: Method,
    /// Initial node count.
    pub nodes: usize,
    pub sample_size: usize,
    pub aggregators: Option<usize>,
    pub success_fraction: Option<f64>,
    pub ping_timeout_ms: Option<f64>,
    pub activity_window: Option<u64>,
    pub seed: u64,
    pub max_rounds: u64,
    pub horizon_ms: Option<f64>,
    pub stop_at_target: bool,
    pub eval_every: u64,
    pub exec: Exec,
    pub task: TaskSpec,
    pub partition: PartitionScheme,
    pub trainer: TrainerConfig,
    pub latency: LatencySpec,
    pub compute: ComputeModel,
    pub faults: FaultSchedule,
    pub wire: WireSizes,
    pub modest: ModestOptions,
    /// Keep every round's aggregated model in the report.
    #[serde(skip)]
    pub record_models: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            method: Method::Modest,
            nodes: 32,
            sample_size: 4,
            aggregators: None,
            success_fraction: None,
            ping_timeout_ms: None,
            activity_window: None,
            seed: 0,
            max_rounds: 100,
            horizon_ms: None,
            stop_at_target: false,
            eval_every: 1,
            exec: Exec::Parallel,
            task: TaskSpec::default(),
            partition: PartitionScheme::Iid,
            trainer: TrainerConfig::default(),
            latency: LatencySpec::default(),
            compute: ComputeModel::default(),
            faults: FaultSchedule::default(),
            wire: WireSizes::default(),
            modest: ModestOptions::default(),
            record_models: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}

/// A validated scenario with every default resolved.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub protocol: ProtocolConfig,
    /// Initial nodes plus joiners.
    pub total_nodes: usize,
    pub latency: LatencyModel,
    pub task: Task,
    /// Trainer settings with the session-derived seed.
    pub trainer: TrainerConfig,
    pub stall_window: Time,
    pub straggler_timeout: Option<Time>,
    pub horizon: Option<Time>,
    pub expected_round: Time,
    pub auto_rejoin: bool,
    pub fixed_aggregator: Option<NodeId>,
}

impl Scenario {
    /// Validates `config`; relative latency-matrix paths resolve against `base`.
    pub fn new(config: ScenarioConfig, base: &Path) -> Result<Self, ConfigError> {
        let c = &config;
        let n = c.nodes;
        let s = c.sample_size;
        if n < 2 {
            return Err(ConfigError::Invalid(format!(
                "need at least 2 nodes (got {n})"
            )));
        }
        if s == 0 || s > n {
            return Err(ConfigError::Invalid(format!(
                "sample size must satisfy 1 <= s <= n (got s = {s}, n = {n})"
            )));
        }
        if c.max_rounds == 0 {
            return Err(ConfigError::Invalid("max_rounds must be >= 1".into()));
        }
        if c.eval_every == 0 {
            return Err(ConfigError::Invalid("eval_every must be >= 1".into()));
        }
        c.faults.validate(n)?;
        c.compute.validate()?;
        c.trainer.validate()?;
        if c.wire.bytes_per_param == 0 {
            return Err(ConfigError::Invalid("bytes_per_param must be >= 1".into()));
        }
        let total_nodes = n.max(c.faults.max_node_bound());
        let latency = LatencyModel::load(&c.latency, total_nodes, c.seed, base)?;

        let z = c.faults.max_concurrent_failures();
        let aggregators = c.aggregators.unwrap_or(z + 1);
        let success_fraction = match c.success_fraction {
            Some(sf) => sf,
            None if z == 0 => 1.0,
            None => {
                let sf = (s - z.min(s)) as f64 / s as f64;
                if sf <= 0.5 {
                    return Err(ConfigError::Invalid(format!(
                        "the fault schedule has up to {z} concurrent failures, so the derived \
                         success fraction (s - z) / s = {sf} violates sf > 0.5; set \
                         success_fraction explicitly"
                    )));
                }
                sf
            }
        };
        if aggregators > s {
            return Err(ConfigError::Invalid(format!(
                "aggregators must not exceed the sample size (a = {aggregators}, s = {s}); \
                 a defaults to one more than the largest number of concurrent failures"
            )));
        }
        let ping_timeout = c
            .ping_timeout_ms
            .map(from_ms)
            .unwrap_or_else(|| 2 * latency.max_rtt());
        if ping_timeout == 0 {
            return Err(ConfigError::Invalid("ping timeout must be positive".into()));
        }
        let activity_window = c
            .activity_window
            .unwrap_or_else(|| 2 * n.div_ceil(s) as u64);
        let protocol = ProtocolConfig {
            sample_size: s,
            aggregators,
            success_fraction,
            ping_timeout,
            activity_window,
        };
        protocol.validate()?;

        let fixed_aggregator = if c.modest.fixed_aggregator {
            if aggregators != 1 {
                return Err(ConfigError::Invalid(
                    "fixed_aggregator requires aggregators = 1".into(),
                ));
            }
            if s >= n {
                return Err(ConfigError::Invalid(
                    "fixed_aggregator requires s < n, the aggregator does not train".into(),
                ));
            }
            let initial: Vec<NodeId> = (0..n as u64).map(NodeId).collect();
            latency.most_central(&initial)
        } else {
            None
        };

        let trainer = TrainerConfig {
            seed: rng::derive(c.seed, &[rng::tag::TRAIN, c.trainer.seed]),
            ..c.trainer
        };
        let task = c.task.build(total_nodes, c.partition, &trainer, c.seed)?;
        let expected_round = c
            .modest
            .expected_round_ms
            .map(from_ms)
            .unwrap_or(c.compute.mean() + 2 * ping_timeout);
        let stall_window = c
            .modest
            .stall_window_ms
            .map(from_ms)
            .unwrap_or((total_nodes as u64 + 10) * ping_timeout + 3 * expected_round);
        let straggler_timeout = match c.modest.straggler_timeout_ms {
            _ if c.modest.no_straggler_timeout => None,
            Some(ms) => Some(from_ms(ms)),
            None => Some(expected_round),
        };
        Ok(Self {
            protocol,
            total_nodes,
            latency,
            task,
            trainer,
            stall_window,
            straggler_timeout,
            horizon: c.horizon_ms.map(from_ms),
            expected_round,
            auto_rejoin: c.modest.auto_rejoin.unwrap_or(true),
            fixed_aggregator,
            config,
        })
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        Self::new(ScenarioConfig::from_toml(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::new(ScenarioConfig::load(path)?, base)
    }

    pub fn initial_nodes(&self) -> usize {
        self.config.nodes
    }

    pub fn exec(&self) -> Exec {
        self.config.exec
    }

    /// Executes the configured method.
    pub fn run(&self) -> RunReport {
        match self.config.method {
            Method::Modest => runtime::run(self),
            Method::Fedavg => baselines::fedavg::run(self),
            Method::Dsgd => baselines::dsgd::run(self),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::{FaultEntry, FaultKind};

    fn base() -> ScenarioConfig {
        ScenarioConfig {
            nodes: 20,
            sample_size: 5,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_resolve() {
        let sc = Scenario::new(base(), Path::new(".")).unwrap();
        assert_eq!(sc.protocol.aggregators, 1);
        assert_eq!(sc.protocol.success_fraction, 1.0);
        assert_eq!(sc.protocol.activity_window, 8);
        assert_eq!(sc.protocol.ping_timeout, 2 * sc.latency.max_rtt());
        assert_eq!(
            sc.stall_window,
            30 * sc.protocol.ping_timeout + 3 * sc.expected_round
        );
        assert_eq!(sc.straggler_timeout, Some(sc.expected_round));
    }

    #[test]
    fn fault_schedule_drives_a_and_sf() {
        let mut c = base();
        c.sample_size = 10;
        c.faults = FaultSchedule::new(vec![
            FaultEntry {
                time_ms: 10.0,
                action: FaultKind::Crash,
                node: 1,
            },
            FaultEntry {
                time_ms: 10.0,
                action: FaultKind::Crash,
                node: 2,
            },
        ]);
        let sc = Scenario::new(c.clone(), Path::new(".")).unwrap();
        assert_eq!(sc.protocol.aggregators, 3);
        assert!((sc.protocol.success_fraction - 0.8).abs() < 1e-12);
        assert!(sc.straggler_timeout.is_some());
        c.sample_size = 4;
        assert!(matches!(
            Scenario::new(c, Path::new(".")),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut c = base();
        c.success_fraction = Some(0.4);
        let err = Scenario::new(c, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("0.5 < sf"), "{err}");
        let mut c = base();
        c.aggregators = Some(6);
        assert!(Scenario::new(c, Path::new(".")).is_err());
        let mut c = base();
        c.sample_size = 21;
        assert!(Scenario::new(c, Path::new(".")).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            method = "dsgd"
            nodes = 8
            sample_size = 2
            seed = 3

            [task]
            name = "softmax"
            classes = 3
            dim = 4
            calibration_epochs = 0

            [partition]
            scheme = "dirichlet"
            alpha = 0.5

            [latency]
            kind = "synthetic"
            lo_ms = 5
            hi_ms = 20

            [compute]
            kind = "constant"
            ms = 100

            [[faults]]
            time_ms = 50
            action = "crash"
            node = 2
        "#;
        let c = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(c.method, Method::Dsgd);
        assert_eq!(c.faults.entries.len(), 1);
        let again = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert!(ScenarioConfig::from_toml("nodes = 3\nbogus = 1\n").is_err());
    }
}
