//! Dynamic flow networks under stochastic cyber-physical disruptions.
//!
//! The crate models single-origin single-destination link networks whose
//! flow capacities and sensors switch with a continuous-time Markov chain,
//! simulates the resulting piecewise-deterministic dynamics, certifies
//! stability through Lyapunov drift conditions, and synthesises controls
//! that attain min-cut style throughput.

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod capacity;
pub mod controls;
pub mod dynamics;
pub mod error;
pub mod flow;
mod grid;
pub mod invariant;
pub mod model;
pub mod modes;
pub mod network;
pub mod scenario;
pub mod sim;
pub mod stability;

pub use analysis::{analyze, synthesize, table, Analysis, Synthesis, Table};
pub use capacity::{capacity_summary, CapacitySummary};
pub use controls::ControlLaw;
pub use error::{FlownetError, Result};
pub use flow::{LinkFlow, ModedFlow, SendingFamily};
pub use model::Model;
pub use modes::{ModeSystem, SensorFault};
pub use network::{build_network, Network, Storage};
pub use scenario::{ControlSpec, Matrix, Scenario, StorageKind, Variant};
pub use sim::{simulate, SimOptions, Trajectory};
pub use stability::{certified_throughput, CertifyOptions, Criterion};
