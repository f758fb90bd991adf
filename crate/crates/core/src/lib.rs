//! Raft with epidemic AppendEntries dissemination and decentralized commit,
//! inside a deterministic network simulator.

pub mod checker;
pub mod commit;
pub mod config;
pub mod experiment;
pub mod gossip;
pub mod raft;
pub mod trace;
pub mod types;
pub mod metrics;
pub mod sim;
