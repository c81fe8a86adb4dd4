//! Voxel decoder: ridge input map, residual MLP backbone, three heads,
//! pretraining and the first-layer weight probe.

mod model;
mod pretrain;
mod probe;
mod ridge;

pub use model::{
    decoder_backward, decoder_backward_adapted, decoder_forward, heads_backward, heads_forward,
    AttachPoints, BlockGrads, DecoderAdapterGrads, DecoderAdapters, DecoderCache, DecoderDims,
    DecoderGrads, DecoderWeights, HeadOutputs, HeadsCache, ResidualBlock, BLOCKS,
    PRIOR_INIT_NOISE,
};
pub use pretrain::{
    fit_input_ridge, phase_for_epoch, phase_switch_epoch, pretrain, ridge_target_projection,
    EpochLog, Phase, PretrainLog,
};
pub use probe::{first_layer_stats, first_layer_stats_of, gini, FirstLayerStats, HISTOGRAM_BINS};
pub use ridge::{ridge_fit, RidgeMap};
