//! Ephemeral classroom sessions over a websocket: join and pairing, event
//! ingestion with live fan-out to observers, teacher snapshots, anonymized
//! export and end-of-session wipe. Nothing is written to disk.

pub mod client;
pub mod harness;
pub mod protocol;
pub mod server;
pub mod session;

pub use client::Client;
pub use harness::{run_agents, AgentRun, AgentRunOptions};
pub use protocol::{ClientMessage, Role, ServerMessage, SnapshotView};
pub use server::{serve, spawn_local, Registry};
pub use session::{Session, SessionConfig};
