//! Tree-shaped two-phase commit over log streams with dynamic partition
//! transfer, unknown-state handling and a deterministic simulator.

pub mod error;
pub mod log_engine;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod state_machine;
pub mod trace;
pub mod transfer;
pub mod types;
pub mod unknown;
