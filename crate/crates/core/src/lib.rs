//! Disentangled graph cognitive diagnosis.
//!
//! Students, exercises and concepts are embedded on three graphs built from
//! the same data: the student representation is learned on the full
//! interaction graph by a meta-multigraph aggregator with learnable, pruned
//! propagation paths; exercise and concept representations are learned by
//! graph attention on the exercise–concept relation graph and the concept
//! dependency graph, which never see response logs. A diagnostic head turns
//! the three representations into a response probability, and the whole
//! model is trained by alternating first-order bilevel Adam steps.
//!
//! The `examples/` directory holds one runnable program per capability.

pub mod dataset;
pub mod diagnosis;
pub mod evaluation;
pub mod gat;
pub mod graphs;
pub mod model;
pub mod numeric;
pub mod student_meta;
pub mod trainer;

pub mod cli;

mod error;

pub use error::{Error, Result};
