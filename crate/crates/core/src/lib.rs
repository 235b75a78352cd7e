//! Training-optimization toolkit for wide-and-deep recommendation workloads.
//!
//! The crate models the embedding layer of a wide-and-deep model as an
//! executable operator pipeline (unique / partition / gather / shuffle /
//! stitch / segment reduction), plans the dimension-packing, kernel-fusion,
//! micro-batch and kernel-interleaving optimizations on top of it, wraps the
//! embedding store in a two-tier hot/cold cache, and quantifies the effect of
//! all of the above with a deterministic discrete-event simulator over a
//! multi-executor topology.
//!
//! The packed execution path is bit-identical to the naive per-field
//! reference path, so every optimization is checkable by exact output
//! comparison; the simulator only changes *when* work happens, never *what*
//! is computed.

pub mod config;
pub mod dag;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod hybrid_hash;
pub mod interleaving;
pub mod ops;
pub mod packing;
pub mod report;
pub mod sim;
pub mod strategy;
pub mod workload;

pub use error::{Error, Result};
