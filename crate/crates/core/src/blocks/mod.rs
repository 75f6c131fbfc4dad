//! The block stack: query mixer, cross attention and output fusion, the
//! per-layer action FFNs, task heads and checkpoints.

pub mod checkpoint;
pub mod config;
pub(crate) mod layers;
pub mod model;
pub mod ops;
pub mod params;

pub use config::{Ablations, Decoupling, ModelConfig, PRESET_NAMES};
pub use layers::LayerKv;
pub use model::{bce_with_logit, head_layout, layout_for_dims, Gradients, MixFormer, RequestLoss, SequenceSide};
pub use ops::{cross_attention, head_mixing, mixformer_block, output_fusion, project_actions, query_mixer, BlockOp};
pub use params::{BlockParams, DenseParams, SelfAttnParams, SeqFfnParams, TaskHeadParams, Tensors};
