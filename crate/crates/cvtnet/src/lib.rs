//! Builds a label tree from a classifier's confusion structure and
//! trains a coarse-to-fine branch network over it.
//!
//! The pipeline: classifier score records are accumulated into a
//! weighted confusion graph over categories ([`congraph`]); hierarchical
//! modularity-based community detection turns the graph into a strictly
//! coarsening partition hierarchy ([`community`]); the hierarchy becomes
//! a tree whose leaves are the categories ([`cvt`]); and a small branch
//! network with one class-score head per tree level is trained in two
//! phases, coarse branches first ([`vtnet`]).
//!
//! See the `examples/` directory for one runnable example per stage, or
//! the `cvtnet` binary for the file-driven pipeline.

pub mod cli;
pub mod community;
pub mod congraph;
pub mod cvt;
pub mod error;
pub mod fixtures;
pub mod ingest;
pub mod vtnet;

pub use error::{Error, Result};
