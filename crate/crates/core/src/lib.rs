//! Gossip-based coordination for groups of agents, plus a deterministic
//! round-based simulator to exercise it.

pub mod coordination;
pub mod dissemination;
pub mod harness;
pub mod membership;
pub mod model;
pub mod node;
pub mod rng;
pub mod sim;
pub mod store;
pub mod temporal;
pub mod trust;
