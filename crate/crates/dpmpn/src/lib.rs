//! Dynamically pruned message passing networks for knowledge-base
//! completion: a full-graph GNN producing shared node states, a per-query
//! pruned GNN over a growing subgraph, and a flow-style attention module
//! that decides where the subgraph grows. Includes training with leakage
//! masking, filtered ranking evaluation, and attention-subgraph export.

pub mod agnn;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod expand;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod ignn;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
