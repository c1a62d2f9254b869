//! Volumetric networks: declarative layer specs, a CPU executor with
//! backpropagation, parameter storage and the Adam optimizer.

pub mod attention;
pub mod exec;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod spec;

pub use attention::{apply_mask_guidance, attention_map, attention_map_backward};
pub use exec::{backward, forward, forward_trace, Forward, Gradients, Trace};
pub use optim::Adam;
pub use params::{
    add_params, check_params, init_params, transfer_parameters, zeros_like_spec, Archive, Checkpoint, CheckpointMeta, LayerParams,
    ParamSet, Phase, Tensor,
};
pub use spec::{
    build_discriminator, build_fusion_branch, build_generator, build_seg_branch, LayerKind, LayerSpec, NetworkSpec,
    ATTENTION_ID, HEAD_ID, TRUNK_TAPS,
};
