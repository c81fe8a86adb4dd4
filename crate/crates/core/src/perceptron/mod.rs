//! Visual perceptron: convolutional pyramid, proposal generation, RoI
//! pooling, detection and mask heads, fusion variants, training and
//! inference.

pub mod boxes;
mod infer;
mod model;
mod roi_align;
mod train;

pub use boxes::{decode_box, encode_box, nms, BoxXyxy};
pub use infer::{
    infer, paste_mask, probe_forward, rle_encode, DetectionItem, DetectionSet, MaskRle,
    PredictionRecord, ProbeOutput,
};
pub use model::{
    apply_fusion, assign_level, backbone_backward, box_head_backward, box_head_forward,
    fusion_backward, heads_forward, image_backbone, level_anchors, mask_head_backward,
    mask_head_forward, rpn_forward, rpn_propose, FusionCache, Proposal, RpnOutput, VpDims,
    VpGrads, VpWeights, LEVELS, STRIDES,
};
pub use roi_align::{roi_align, roi_align_vjp};
pub use train::{train_vp, VoxelPath, VpEpochLog, VpModel, VpTrainLog};
