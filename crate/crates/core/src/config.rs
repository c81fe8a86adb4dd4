//! Run configuration. One JSON document drives synthesis, pretraining,
//! perceptron training and evaluation; unknown keys are rejected so typos
//! fail loudly, and a stable hash of the canonical JSON is stamped into
//! every artifact a run produces.

use serde::{Deserialize, Serialize};

use crate::rng::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Shared cross-attention block at every pyramid level.
    CrossAttn,
    /// Channel concatenation of a broadcast token summary + 1x1 projection.
    Concat,
    /// Image-only baseline; voxels are ignored entirely.
    None,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::CrossAttn => write!(f, "cross-attn"),
            FusionMode::Concat => write!(f, "concat"),
            FusionMode::None => write!(f, "none"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Square image side in pixels; must be divisible by the coarsest stride.
    pub image_size: usize,
    pub image_channels: usize,
    /// Length of one voxel recording (d_v).
    pub voxel_dim: usize,
    /// Ridge output / decoder tokenizer input width (d_0).
    pub decoder_input_dim: usize,
    /// Token count T of the decoder output.
    pub tokens: usize,
    /// Channel width D of each token.
    pub token_dim: usize,
    /// Low-level latent shape (c, h, w).
    pub latent: [usize; 3],
    /// Channel width d of every pyramid level.
    pub fpn_dim: usize,
    /// Query/key width d_k of the fusion block.
    pub attn_dim: usize,
    /// RoI pooling grid p.
    pub roi_size: usize,
    /// Mask head resolution m.
    pub mask_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub train_count: usize,
    pub val_count: usize,
    /// Number of shape categories.
    pub categories: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Additive voxel noise level sigma.
    pub noise_sigma: f32,
    /// Occupancy grid side; the descriptor carries category counts plus this
    /// grid's coverage fractions.
    pub occupancy_grid: usize,
    /// Additive pixel noise on rendered images.
    pub image_noise: f32,
    /// Range of object half-sizes in pixels.
    pub min_radius: usize,
    pub max_radius: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f32,
    pub weight_decay: f32,
    /// Weight of the low-level L1 term.
    pub alpha1: f32,
    /// Weight of the contrastive term.
    pub alpha2: f32,
    /// Contrastive temperature.
    pub tau: f32,
    /// Beta(b, b) parameter for the mixing factors.
    pub mix_beta: f32,
    /// Ridge penalty for the voxel input map.
    pub ridge_lambda: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VpConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epoch fraction after which the step schedule decays the lr.
    pub lr_step_fraction: f32,
    pub lr_gamma: f32,
    pub lora_rank: usize,
    pub fusion: FusionMode,
    /// RPN anchors kept before and after NMS.
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms_iou: f32,
    /// RoI sampling for the head losses.
    pub rois_per_image: usize,
    pub positive_iou: f32,
    pub negative_iou: f32,
    /// Box-regression weight (Appendix-style lambda).
    pub lambda_reg: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
    /// Area thresholds (px^2) separating small/medium/large objects.
    pub area_small: f64,
    pub area_large: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: Dims,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub vp: VpConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl RunConfig {
    /// Desk-scale defaults: minutes of CPU, end to end.
    pub fn desk_default() -> Self {
        RunConfig {
            seed: 0,
            dims: Dims {
                image_size: 64,
                image_channels: 3,
                voxel_dim: 1024,
                decoder_input_dim: 512,
                tokens: 16,
                token_dim: 64,
                latent: [4, 8, 8],
                fpn_dim: 64,
                attn_dim: 64,
                roi_size: 7,
                mask_size: 14,
            },
            generator: GeneratorConfig {
                train_count: 64,
                val_count: 48,
                categories: 8,
                min_objects: 1,
                max_objects: 5,
                noise_sigma: 0.1,
                occupancy_grid: 4,
                image_noise: 0.06,
                min_radius: 4,
                max_radius: 10,
            },
            pretrain: PretrainConfig {
                epochs: 60,
                batch_size: 16,
                lr: 3e-4,
                weight_decay: 1e-2,
                alpha1: 1.0,
                alpha2: 1.0,
                tau: 0.07,
                mix_beta: 0.15,
                ridge_lambda: 100.0,
            },
            vp: VpConfig {
                epochs: 20,
                lr: 4e-3,
                momentum: 0.9,
                weight_decay: 1e-4,
                lr_step_fraction: 0.7,
                lr_gamma: 0.1,
                lora_rank: 16,
                fusion: FusionMode::CrossAttn,
                rpn_pre_nms: 128,
                rpn_post_nms: 24,
                rpn_nms_iou: 0.7,
                rois_per_image: 24,
                positive_iou: 0.5,
                negative_iou: 0.3,
                lambda_reg: 1.0,
            },
            eval: EvalConfig {
                score_thresh: 0.05,
                nms_iou: 0.5,
                max_detections: 100,
                area_small: 144.0,
                area_large: 576.0,
            },
        }
    }

    /// Published-scale settings: 15724-voxel recordings, 256x1664 token
    /// embeddings, d=256 pyramids, 150/20 epochs. Needs real data and a lot
    /// of compute; kept as a config preset, not a tested path.
    pub fn full_scale() -> Self {
        let mut cfg = Self::desk_default();
        cfg.dims.voxel_dim = 15724;
        cfg.dims.tokens = 256;
        cfg.dims.token_dim = 1664;
        cfg.dims.fpn_dim = 256;
        cfg.dims.attn_dim = 256;
        cfg.pretrain.epochs = 150;
        cfg.vp.epochs = 20;
        cfg.eval.area_small = 1024.0; // 32^2
        cfg.eval.area_large = 9216.0; // 96^2
        cfg
    }

    /// Stable hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }

    pub fn from_json(json: &str) -> crate::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::error::Error;
        let err = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        if self.dims.image_size % 16 != 0 {
            return err("dims.image_size", "must be divisible by 16 (coarsest stride)");
        }
        if self.generator.min_objects < 1 || self.generator.max_objects < self.generator.min_objects
        {
            return err("generator.max_objects", "need 1 <= min_objects <= max_objects");
        }
        if self.generator.categories < 2 {
            return err("generator.categories", "need at least 2 categories");
        }
        if self.pretrain.batch_size < 2 {
            return err("pretrain.batch_size", "contrastive mixing needs batch_size >= 2");
        }
        if self.pretrain.tau <= 0.0 {
            return err("pretrain.tau", "temperature must be > 0");
        }
        if self.pretrain.mix_beta <= 0.0 {
            return err("pretrain.mix_beta", "Beta parameter must be > 0");
        }
        if self.vp.lora_rank == 0 {
            return err("vp.lora_rank", "rank must be >= 1");
        }
        if self.vp.positive_iou <= self.vp.negative_iou {
            return err("vp.positive_iou", "positive threshold must exceed negative");
        }
        if self.eval.area_small >= self.eval.area_large {
            return err("eval.area_small", "small-area threshold must be below large");
        }
        Ok(())
    }
}

/// Version string stamped into artifacts next to the config hash.
pub fn code_version() -> String {
    format!("pact-{}", env!("CARGO_PKG_VERSION"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = RunConfig::desk_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.clone().hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_are_rejected_with_key_name() {
        let mut json = serde_json::to_value(RunConfig::desk_default()).unwrap();
        json.as_object_mut()
            .unwrap()
            .insert("not_a_key".into(), 1.into());
        let err = RunConfig::from_json(&json.to_string()).unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_key_path() {
        let mut cfg = RunConfig::desk_default();
        cfg.pretrain.tau = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("pretrain.tau"), "{err}");
    }

    #[test]
    fn full_scale_matches_published_dims() {
        let cfg = RunConfig::full_scale();
        assert_eq!(cfg.dims.voxel_dim, 15724);
        assert_eq!((cfg.dims.tokens, cfg.dims.token_dim), (256, 1664));
        assert_eq!(cfg.dims.fpn_dim, 256);
        assert_eq!(cfg.pretrain.epochs, 150);
        assert_eq!(cfg.vp.epochs, 20);
    }
}
