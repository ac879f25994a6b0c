//! Elastic urban-region embeddings from boundary prompts over a spatial token graph.

pub mod bench;
pub mod downstream;
pub mod embedding;
pub mod error;
pub mod extraction;
pub mod geometry;
pub mod graph;
pub mod numeric;
pub mod prompt;
pub mod region;
pub mod rtree;
pub mod schema;
pub mod synth;
pub mod trainer;
pub mod trips;

pub use error::{Error, Result};
