//! Digital-twin bridge. A virtual-environment server hosts a scenario whose
//! one "physical" slot is driven by an external plant emulator over TCP;
//! the other slots are virtual peers run by trained policies.
//!
//! Each tick closes the loop: the server takes the freshest state estimate
//! (update), builds the twin's observation among its peers (observe), runs
//! the policy (decide) and answers with an action command (act); the plant
//! applies it with its own dynamics and reports a noisy estimate.

pub mod emulator;
pub mod protocol;
pub mod server;
pub mod session;
pub mod trace;

use twinmarl_core::error::{ReplicaError, ScenarioError};
use twinmarl_core::eval::EvalError;

pub use emulator::{run_plant_emulator, EmulatorReport, PlantEmulatorConfig};
pub use protocol::{Payload, TwinSyncMessage, PROTOCOL_VERSION};
pub use server::{run_local_twin, serve_twin, Clock, ServerOptions};
pub use session::{SessionConfig, TrajPoint, TwinReport, TwinSession};

#[derive(Debug, thiserror::Error)]
pub enum TwinError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Replica(#[from] ReplicaError),
    #[error("could not reach {addr} after {attempts} attempts: {last}")]
    Connect { addr: String, attempts: u32, last: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trace: {0}")]
    Trace(String),
}
