//! Decentralized federated learning over a lightweight blockchain.
//!
//! Participants hold private data shards and take turns as update
//! providers, aggregators and verifiers. Each round, stake-weighted role
//! selection picks the committees, providers broadcast sparsified local
//! updates, aggregators assemble candidate global updates through
//! stake-and-accuracy filtering, and a verifier committee runs
//! distance-based scoring plus majority voting to commit exactly one
//! block per round. Everything is deterministic in the master seed.

pub mod adversary;
pub mod aggregation;
pub mod chain;
pub mod compression;
pub mod consensus;
pub mod learner;
pub mod params;
pub mod roles;
pub mod seeds;
pub mod sim;

pub use params::ParameterVector;
pub use sim::{run_fedavg_baseline, run_simulation, SimConfig, SimOutput};
