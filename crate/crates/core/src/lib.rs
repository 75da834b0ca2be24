//! CERES: a graph-conditioned transformer for semi-structured shopping
//! sessions.

pub mod session;
pub mod synth;
pub mod codec;
pub mod nn;
pub mod model;
pub mod eval;
pub mod train;
pub mod ablation;
pub mod corpus;
pub mod config;
pub mod checks;
