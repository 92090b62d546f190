//! The adaptation detector: block feature extractor with source and target
//! pipelines, prior heads, recovery blocks, discriminators and a dense head.

pub mod boxes;
mod checkpoint;
mod layers;
mod net;
mod params;

pub use boxes::{decode_detections, nms, AnchorGrid, AnchorLabel, Detection};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use layers::{Conv, ConvBnRelu, Init};
pub use net::{
    pen_param_count, rfrb_param_count, stack_chw, Block, Detector, Discriminator, Features, Head, ModelConfig, Net, Pen,
    Rfrb, ADAPT_LEVELS, OBJECTNESS_PRIOR,
};
pub use params::{BnId, Ctx, ParamId, ParamStore};
