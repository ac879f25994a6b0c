//! Region embeddings from aggregated subgraph vectors via multi-channel
//! message passing between subgraphs.
pub mod channels;
pub mod model;
pub mod pool;

pub use channels::{
    channel_operators, dtw, gamma_neighbor, gamma_position, gamma_structure, structure_distance, Channel,
    ChannelConfig, MessageAgg, StructureTransform,
};
pub use model::{
    message_pass, message_pass_values, EmbeddedRegion, ModelManifest, RegionModel, RegionModelParams, RegionVars,
    SubLayer, MODEL_FORMAT_VERSION,
};
pub use pool::{ContextPool, PoolEntry};
