//! Per-channel message-passing power allocator.
//!
//! Each channel is a complete graph over the pairs. Nodes carry the direct
//! gain, ordered edges carry both cross gains, and a small shared network
//! runs a fixed number of message-passing rounds to produce a power level per
//! (pair, channel). Gradients are written out by hand for this architecture.

mod checkpoint;
mod features;
mod kernel;
mod model;
mod network;

pub use checkpoint::{from_json, load_model, save_model, to_json};
pub use features::{build_features, FeatureTransform, GraphFeatures, NormStats, LOG_FLOOR};
pub use model::{
    layer, layer_offset, Aggregation, GnnModel, LayerView, PowerHead, TrainingMetadata, DEFAULT_ROUNDS, LAYER_NAMES,
    LAYER_SHAPES, MESSAGE_DIM, PARAM_COUNT,
};
pub use network::{post_process, post_process_backward, ForwardCache, ForwardPass};
