//! Federated learning orchestration with FedAvg, FedProx and Ditto, plus a
//! deterministic virtual-time federation simulator.

pub mod aggregation;
pub mod client;
pub mod config;
pub mod error;
pub mod metrics;
pub mod params;
pub mod protocol;
pub mod server;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
