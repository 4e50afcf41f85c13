//! Open-set graph class-incremental learning: a GCN encoder trained with a
//! prototypical conditional VAE and hypersphere classification over a
//! sequence of disjoint-class tasks, with pseudo-sample replay and open-set
//! evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod tape;
pub mod tasks;

pub use error::{Error, Result};
