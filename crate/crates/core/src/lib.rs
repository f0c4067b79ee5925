//! Runtime digital shadow of a distributed pub/sub system with
//! alert-driven fault-trajectory extraction.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`]: the layered system graph (members, communication and tree layers)
//! * [`aggregation`]: accumulated properties over tree layers, the process tree
//! * [`detection`]: symptom plugins, the watchlist, the alert store
//! * [`subgraph`]: the alert-driven diagnostic subgraph and its watchlist
//! * [`trajectory`]: symptom correlation, trajectory tracing and ranking
//! * [`simulator`]: seeded topologies, fault injection, event logs
//! * [`pipeline`]: offline replay tying the pieces together

pub mod aggregation;
pub mod canonical;
pub mod detection;
pub mod model;
pub mod pipeline;
pub mod simulator;
pub mod subgraph;
pub mod trajectory;

pub use model::{AttributeVector, Edge, EdgeLayer, GraphSchema, MemberId, MemberKind, SystemGraph};
