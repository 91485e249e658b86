//! Deterministic simulation of decentralized sampling-based learning.
//!
//! Nodes derive per-round trainer samples from a gossiped membership view,
//! push models to a small set of aggregators, and let the fastest aggregator
//! drive the next round. FedAvg and D-SGD baselines run on the same event
//! engine and byte accounting.

pub mod baselines;
pub mod learning;
pub mod membership;
pub mod metrics;
pub mod par;
pub mod protocol;
pub mod rng;
pub mod runtime;
pub mod sampling;
pub mod scenario;
pub mod simnet;

pub use membership::{EventKind, NodeId, View};
pub use par::Exec;
pub use protocol::{Model, ProtocolConfig};
pub use scenario::{Method, Scenario, ScenarioConfig};
