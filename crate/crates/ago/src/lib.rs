//! Constraint-free computational-graph optimization at desk scale.
//!
//! The pipeline: load an operator graph, partition it into acyclic
//! subgraphs under a tuning-complexity weight threshold, split complicated
//! subgraphs into mini-subgraphs for divide-and-conquer tuning, and search
//! tiling/fusion schedules against a deterministic cache cost model.
//! Intensive fusion (stitching two complex operators) is certified
//! redundancy-free by iteration-space analysis and double-checked by a
//! brute-force loop interpreter.

pub mod cli;
pub mod fusion;
pub mod graph;
pub mod interp;
pub mod partition;
pub mod reformer;
pub mod tuner;
pub mod weight;
