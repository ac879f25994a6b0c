//! Token embeddings, the node encoder and region aggregation.
pub mod encoder;
pub mod transr;

pub use encoder::{aggregate_region, embed_subgraphs, EncoderParams, NodeBatch};
pub use transr::{init_transr, TokenEmbeddingTable, TransrConfig};
