//! Inference: proposals → fused RoI features → per-class scores, decoded
//! boxes, per-class NMS, mask extraction, and the JSON-lines prediction
//! format.

use serde::Serialize;

use crate::config::{EvalConfig, FusionMode, VpConfig};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::perceptron::boxes::{decode_box, nms, BoxXyxy};
use crate::perceptron::model::{
    apply_fusion, assign_level, box_head_forward, image_backbone, mask_head_forward, rpn_forward,
    rpn_propose, STRIDES,
};
use crate::perceptron::roi_align::roi_align;
use crate::perceptron::train::VpModel;
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone)]
pub struct DetectionItem {
    pub category_id: usize,
    pub score: f32,
    pub box_xyxy: BoxXyxy,
    /// m×m mask probabilities for the predicted class.
    pub mask_probs: Tensor,
}

/// Ranked predictions for one image: sorted by descending score, at most
/// `max_detections` entries.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    pub image_id: usize,
    pub items: Vec<DetectionItem>,
}

pub fn infer(
    model: &VpModel,
    image_id: usize,
    image: &Tensor,
    voxel: Option<&Tensor>,
    vp_cfg: &VpConfig,
    eval_cfg: &EvalConfig,
) -> Result<DetectionSet> {
    if model.mode != FusionMode::None && voxel.is_none() {
        return Err(Error::domain(
            "infer",
            "checkpoint was trained with voxel fusion but no voxel was provided",
        ));
    }
    if model.mode == FusionMode::None && voxel.is_some() {
        return Err(Error::domain(
            "infer",
            "checkpoint is image-only but a voxel was provided",
        ));
    }
    let dims = model.vp.dims;
    let tokens = match (&model.voxel_path, voxel) {
        (Some(path), Some(v)) => Some(path.tokens(v)?),
        _ => None,
    };
    let (levels, _) = image_backbone(&model.vp, image)?;
    let rpn_out = rpn_forward(&model.vp, &levels)?;
    let (fused, _) = apply_fusion(&model.vp, &levels, tokens.as_ref())?;
    let proposals = rpn_propose(
        &dims,
        &rpn_out,
        vp_cfg.rpn_pre_nms,
        vp_cfg.rpn_post_nms,
        vp_cfg.rpn_nms_iou,
    )?;

    // score every proposal per class
    struct Candidate {
        category_id: usize,
        score: f32,
        bx: BoxXyxy,
    }
    let c1 = dims.categories + 1;
    let mut candidates: Vec<Candidate> = Vec::new();
    for prop in &proposals {
        let feat = roi_align(
            &fused[prop.level],
            &prop.box_xyxy,
            STRIDES[prop.level],
            dims.roi_size,
        )?;
        let (cls_logits, deltas, _) = box_head_forward(&model.vp, &feat)?;
        let probs = ops::softmax_rows(&cls_logits.reshaped(&[1, c1])?, 1.0)?;
        let d = [
            deltas.data()[0],
            deltas.data()[1],
            deltas.data()[2],
            deltas.data()[3],
        ];
        let refined = decode_box(&prop.box_xyxy, &d, dims.image_size as f32);
        for cat in 0..dims.categories {
            let score = probs.data()[cat + 1];
            if score >= eval_cfg.score_thresh {
                candidates.push(Candidate {
                    category_id: cat,
                    score,
                    bx: refined,
                });
            }
        }
    }

    // per-class NMS, then global ranking
    let mut kept: Vec<Candidate> = Vec::new();
    for cat in 0..dims.categories {
        let of_cat: Vec<&Candidate> = candidates.iter().filter(|c| c.category_id == cat).collect();
        if of_cat.is_empty() {
            continue;
        }
        let boxes: Vec<BoxXyxy> = of_cat.iter().map(|c| c.bx).collect();
        let scores: Vec<f32> = of_cat.iter().map(|c| c.score).collect();
        for idx in nms(&boxes, &scores, eval_cfg.nms_iou) {
            kept.push(Candidate {
                category_id: cat,
                score: of_cat[idx].score,
                bx: of_cat[idx].bx,
            });
        }
    }
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.category_id.cmp(&b.category_id))
    });
    kept.truncate(eval_cfg.max_detections);

    // masks from the predicted-class channel, pooled on the refined box
    let mut items = Vec::with_capacity(kept.len());
    for cand in kept {
        let level = assign_level(&cand.bx);
        let feat = roi_align(&fused[level], &cand.bx, STRIDES[level], dims.roi_size)?;
        let (mask_logits, _) = mask_head_forward(&model.vp, &feat)?;
        let msz = dims.mask_size;
        let channel = Tensor::from_vec(
            &[msz, msz],
            mask_logits.data()[cand.category_id * msz * msz..(cand.category_id + 1) * msz * msz]
                .to_vec(),
        )?;
        let mask_probs = ops::sigmoid(&channel);
        items.push(DetectionItem {
            category_id: cand.category_id,
            score: cand.score,
            box_xyxy: cand.bx,
            mask_probs,
        });
    }
    Ok(DetectionSet { image_id, items })
}

/// Captured intermediates for the inspection probes: per-level attention
/// (cross-attention mode only) plus raw and fused feature rows.
pub struct ProbeOutput {
    pub attention: Vec<crate::fusion::AttentionProbe>,
    /// per level: (rows [N_l, d], H_l, W_l)
    pub raw_rows: Vec<(Tensor, usize, usize)>,
    pub fused_rows: Vec<(Tensor, usize, usize)>,
}

/// Forward pass that keeps the fusion intermediates for probing.
pub fn probe_forward(
    model: &VpModel,
    image_id: usize,
    image: &Tensor,
    voxel: &Tensor,
) -> Result<ProbeOutput> {
    let path = model.voxel_path.as_ref().ok_or_else(|| {
        Error::domain("probe_forward", "probes need a voxel-fused checkpoint")
    })?;
    let tokens = path.tokens(voxel)?;
    let (levels, _) = image_backbone(&model.vp, image)?;
    let (fused, cache) = apply_fusion(&model.vp, &levels, Some(&tokens))?;

    let mut raw_rows = Vec::with_capacity(levels.len());
    let mut fused_rows = Vec::with_capacity(levels.len());
    for (raw, f) in levels.iter().zip(fused.iter()) {
        let (h, w) = (raw.shape()[1], raw.shape()[2]);
        raw_rows.push((crate::perceptron::model::level_to_rows(raw), h, w));
        fused_rows.push((crate::perceptron::model::level_to_rows(f), h, w));
    }
    let attention = match cache {
        crate::perceptron::model::FusionCache::CrossAttn { pub_attn, .. } => pub_attn
            .into_iter()
            .enumerate()
            .map(|(level, attn)| crate::fusion::AttentionProbe {
                image_id,
                level,
                attn,
            })
            .collect(),
        _ => Vec::new(),
    };
    Ok(ProbeOutput {
        attention,
        raw_rows,
        fused_rows,
    })
}

/// Paste an m×m mask-probability grid into an image-sized binary mask
/// (bilinear sampling, threshold 0.5).
pub fn paste_mask(probs: &Tensor, bx: &BoxXyxy, image_size: usize) -> BinaryMask {
    let m = probs.shape()[0];
    let mut data = vec![false; image_size * image_size];
    let bw = bx[2] - bx[0];
    let bh = bx[3] - bx[1];
    if bw > 0.0 && bh > 0.0 {
        let y_lo = bx[1].floor().max(0.0) as usize;
        let y_hi = (bx[3].ceil() as usize).min(image_size);
        let x_lo = bx[0].floor().max(0.0) as usize;
        let x_hi = (bx[2].ceil() as usize).min(image_size);
        for py in y_lo..y_hi {
            let cy = py as f32 + 0.5;
            if cy < bx[1] || cy > bx[3] {
                continue;
            }
            let gy = ((cy - bx[1]) / bh * m as f32 - 0.5).clamp(0.0, (m - 1) as f32);
            let y0 = gy.floor() as usize;
            let y1 = (y0 + 1).min(m - 1);
            let fy = gy - y0 as f32;
            for px in x_lo..x_hi {
                let cx = px as f32 + 0.5;
                if cx < bx[0] || cx > bx[2] {
                    continue;
                }
                let gx = ((cx - bx[0]) / bw * m as f32 - 0.5).clamp(0.0, (m - 1) as f32);
                let x0 = gx.floor() as usize;
                let x1 = (x0 + 1).min(m - 1);
                let fx = gx - x0 as f32;
                let v = probs.data()[y0 * m + x0] * (1.0 - fy) * (1.0 - fx)
                    + probs.data()[y0 * m + x1] * (1.0 - fy) * fx
                    + probs.data()[y1 * m + x0] * fy * (1.0 - fx)
                    + probs.data()[y1 * m + x1] * fy * fx;
                data[py * image_size + px] = v > 0.5;
            }
        }
    }
    BinaryMask {
        h: image_size,
        w: image_size,
        data,
    }
}

/// Row-major run-length encoding starting with the count of leading zeros.
pub fn rle_encode(mask: &BinaryMask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0usize;
    for &bit in &mask.data {
        if bit == current {
            count += 1;
        } else {
            runs.push(count);
            current = bit;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

/// One JSON-lines prediction record.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionRecord {
    pub image_id: usize,
    pub category: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub box_xyxy: [f32; 4],
    pub mask_rle: MaskRle,
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskRle {
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl DetectionSet {
    /// Convert to evaluation detections with pasted full-image masks.
    pub fn to_metric_detections(&self, image_size: usize) -> Vec<crate::metrics::Detection> {
        self.items
            .iter()
            .map(|item| crate::metrics::Detection {
                image_id: self.image_id,
                category_id: item.category_id,
                score: item.score,
                box_xyxy: item.box_xyxy,
                mask: Some(paste_mask(&item.mask_probs, &item.box_xyxy, image_size)),
            })
            .collect()
    }

    pub fn to_prediction_records(&self, image_size: usize) -> Vec<PredictionRecord> {
        self.items
            .iter()
            .map(|item| {
                let mask = paste_mask(&item.mask_probs, &item.box_xyxy, image_size);
                PredictionRecord {
                    image_id: self.image_id,
                    category: item.category_id,
                    score: item.score,
                    box_xyxy: item.box_xyxy,
                    mask_rle: MaskRle {
                        size: [mask.h, mask.w],
                        counts: rle_encode(&mask),
                    },
                }
            })
            .collect()
    }
}
