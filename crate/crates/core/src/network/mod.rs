//! Reverse-mode autodiff tape, layers and the model assemblies built from them.

pub mod embedding;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;

pub use embedding::{embedding_dim, Embedding, FeatureBatch};
pub use layers::{BatchNorm, Dense, Layer, Mlp};
pub use model::{
    load_checkpoint, save_checkpoint, softmax_rows, ContrastiveNetwork, DecoderOutput, Encoder, NetworkSpec,
    PredictorInput, PredictorNetwork,
};
pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use tape::{BatchNormArgs, Mode, NodeId, Tape};

#[cfg(test)]
mod tests;
