//! Experiment plumbing: corpora, configuration, checkpoints and the
//! experiment protocols.

pub mod corpus;
pub mod checkpoint;
pub mod config;
pub mod experiments;
