//! Dense fully convolutional networks for liver and lesion segmentation,
//! with hand-written reverse-mode gradients.

mod blocks;
mod checkpoint;
pub mod layers;
mod model;
mod spec;

pub use blocks::{DenseBlock, DenseLayer, TransitionDown, TransitionUp};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    OptimizerState, FORMAT_VERSION,
};
pub use layers::{ForwardCtx, Mode, Param, ParamKind};
pub use model::{build_liver_model, build_tumor_model, BlockTrace, DenseFcn};
pub use spec::{plan_network, BlockKind, LayerPlan, NetworkSpec, PlannedBlock};
