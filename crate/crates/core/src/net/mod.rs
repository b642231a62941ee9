//! The segmentation network: Siamese texture encoder, global context metric
//! and skip-connected decoder, with reverse-mode gradients.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_for, parse_checkpoint, save_checkpoint, MAGIC,
};
pub use config::NetConfig;
pub use model::{
    backbone_forward, decode, dirconv_forward, encode, model_backward, model_forward, model_forward_frozen,
    relation_forward, FeaturePyramid, ForwardState, Mode, Model, NetGraph, RelationVars, BN_EPS,
    BN_MOMENTUM,
};
pub use params::{init_params, Param, ParamKind, ParamStore};
