//! Config-driven deeply supervised segmentation network.

mod checkpoint;
mod config;
mod model;
mod plan;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{
    BlockKind, BlockNode, BlockSpec, ConcatNode, ConvLayerSpec, ConvNode, DropoutPosition,
    DropoutSpec, NetworkConfig, NodeOp, NodeSpec, UpsampleNode, AUX_HEADS, INPUT_ID,
    REFERENCE_DROPOUT,
};
pub use model::{DropoutPolicy, ForwardOptions, ForwardOutput, InitRecord, Network, Param};
pub use plan::{
    output_offset, output_shape, receptive_field, total_stride, ParamInit, ParamSpec,
    ReceptiveField,
};
