//! Perceptron training: detection + mask losses over sampled RoIs with the
//! proposal head trained jointly, SGD with a step schedule. In the fused
//! modes the decoder base stays frozen; only adapters, fusion and the
//! perceptron itself receive updates.

use serde::Serialize;

use crate::config::{FusionMode, RunConfig};
use crate::data::{epoch_batches, Dataset};
use crate::decoder::{
    decoder_backward_adapted, decoder_forward, AttachPoints, DecoderAdapterGrads,
    DecoderAdapters, DecoderWeights, RidgeMap,
};
use crate::error::{Error, Result};
use crate::losses;
use crate::optim::{step_lr, Sgd};
use crate::perceptron::boxes::{encode_box, iou, BoxXyxy};
use crate::perceptron::model::{
    apply_fusion, assign_level, backbone_backward, box_head_backward, box_head_forward,
    fusion_backward, image_backbone, level_anchors, mask_head_backward, mask_head_forward,
    rpn_forward, rpn_level_view, rpn_level_view_vjp, rpn_propose, VpDims, VpGrads, VpWeights,
    LEVELS, STRIDES,
};
use crate::perceptron::roi_align::{roi_align, roi_align_vjp};
use crate::rng::{mix_seed, rng_from};
use crate::tensor::{ops, Tensor};

const STREAM_VP_INIT: u64 = 0x7670_3030;
const STREAM_DEC_INIT: u64 = 0x7670_3031;
const STREAM_LORA: u64 = 0x7670_3032;
const STREAM_ROI: u64 = 0x7670_3033;

/// Positive RoIs fed to the mask loss per image.
const MASK_CAP: usize = 8;

#[derive(Debug, Clone)]
pub struct VoxelPath {
    pub decoder: DecoderWeights,
    pub ridge: RidgeMap,
    pub adapters: Option<DecoderAdapters>,
}

impl VoxelPath {
    /// Decoder tokens [T, D] for one voxel vector.
    pub fn tokens(&self, voxel: &Tensor) -> Result<Tensor> {
        let d_v = voxel.len();
        let m = self.ridge.apply(&voxel.clone().reshaped(&[1, d_v])?)?;
        let (z, _) = decoder_forward(&self.decoder, &m, self.adapters.as_ref())?;
        let dims = self.decoder.dims;
        z.reshaped(&[dims.tokens, dims.token_dim])
    }
}

#[derive(Debug, Clone)]
pub struct VpModel {
    pub mode: FusionMode,
    pub vp: VpWeights,
    pub voxel_path: Option<VoxelPath>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VpEpochLog {
    pub epoch: usize,
    pub l_det: f32,
    pub l_det_rpn: f32,
    pub l_det_roi: f32,
    pub l_mask: f32,
    pub total: f32,
    pub lr: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct VpTrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub fusion: String,
    pub lora_rank: usize,
    pub entries: Vec<VpEpochLog>,
}

struct GtImage {
    boxes: Vec<BoxXyxy>,
    cats: Vec<usize>,
    masks: Vec<Tensor>,
}

fn gather_gt(dataset: &Dataset, i: usize) -> GtImage {
    let anns = dataset.annotations(i);
    GtImage {
        boxes: anns.iter().map(|a| a.box_xyxy).collect(),
        cats: anns.iter().map(|a| a.category_id).collect(),
        masks: anns.iter().map(|a| dataset.mask(a.mask_index)).collect(),
    }
}

/// Anchor labels across levels: (label 0/1, ignore flag, target deltas).
fn rpn_targets(
    dims: &VpDims,
    gt: &GtImage,
    pos_iou: f32,
    neg_iou: f32,
) -> (Vec<usize>, Vec<bool>, Vec<[f32; 4]>) {
    let mut anchors: Vec<BoxXyxy> = Vec::new();
    for level in 0..LEVELS {
        anchors.extend(level_anchors(dims, level));
    }
    let n = anchors.len();
    let mut labels = vec![0usize; n];
    let mut ignore = vec![false; n];
    let mut deltas = vec![[0.0f32; 4]; n];
    let mut best_anchor_per_gt: Vec<(usize, f32)> = vec![(0, -1.0); gt.boxes.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = 0.0f32;
        let mut best_g = None;
        for (g, gbox) in gt.boxes.iter().enumerate() {
            let v = iou(anchor, gbox);
            if v > best {
                best = v;
                best_g = Some(g);
            }
            if v > best_anchor_per_gt[g].1 {
                best_anchor_per_gt[g] = (a, v);
            }
        }
        if best >= pos_iou {
            labels[a] = 1;
            deltas[a] = encode_box(anchor, &gt.boxes[best_g.unwrap()]);
        } else if best >= neg_iou {
            ignore[a] = true;
        }
    }
    // every GT claims its best-overlapping anchor
    for (g, &(a, v)) in best_anchor_per_gt.iter().enumerate() {
        if v > 0.01 {
            labels[a] = 1;
            ignore[a] = false;
            deltas[a] = encode_box(&anchors[a], &gt.boxes[g]);
        }
    }
    (labels, ignore, deltas)
}

struct SampledRoi {
    bx: BoxXyxy,
    level: usize,
    /// 0 background, otherwise category + 1
    label: usize,
    box_target: [f32; 4],
    /// index into gt arrays (positives only)
    gt_index: usize,
}

fn sample_rois(
    proposals: &[BoxXyxy],
    gt: &GtImage,
    cfg: &RunConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<SampledRoi> {
    use rand::seq::SliceRandom;
    let mut candidates: Vec<SampledRoi> = Vec::new();
    let all: Vec<BoxXyxy> = proposals
        .iter()
        .cloned()
        .chain(gt.boxes.iter().cloned())
        .collect();
    for bx in all {
        let mut best = 0.0f32;
        let mut best_g = None;
        for (g, gbox) in gt.boxes.iter().enumerate() {
            let v = iou(&bx, gbox);
            if v > best {
                best = v;
                best_g = Some(g);
            }
        }
        if best >= cfg.vp.positive_iou {
            let g = best_g.unwrap();
            candidates.push(SampledRoi {
                bx,
                level: assign_level(&bx),
                label: gt.cats[g] + 1,
                box_target: encode_box(&bx, &gt.boxes[g]),
                gt_index: g,
            });
        } else if best < cfg.vp.negative_iou {
            candidates.push(SampledRoi {
                bx,
                level: assign_level(&bx),
                label: 0,
                box_target: [0.0; 4],
                gt_index: usize::MAX,
            });
        }
        // in-between: ignored
    }
    let (mut pos, mut neg): (Vec<SampledRoi>, Vec<SampledRoi>) =
        candidates.into_iter().partition(|r| r.label > 0);
    pos.shuffle(rng);
    neg.shuffle(rng);
    let target = cfg.vp.rois_per_image;
    let n_pos = pos.len().min(target / 2);
    let n_neg = neg.len().min(target - n_pos);
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    pos.extend(neg);
    pos
}

/// Nearest-neighbor crop of a full-image binary mask to an RoI grid.
fn mask_target(gt_mask: &Tensor, bx: &BoxXyxy, m: usize) -> Tensor {
    let h = gt_mask.shape()[0];
    let w = gt_mask.shape()[1];
    let mut out = Tensor::zeros(&[m, m]);
    let bw = bx[2] - bx[0];
    let bh = bx[3] - bx[1];
    if bw <= 0.0 || bh <= 0.0 {
        return out;
    }
    for gy in 0..m {
        let sy = bx[1] + (gy as f32 + 0.5) * bh / m as f32;
        let py = (sy.floor() as isize).clamp(0, h as isize - 1) as usize;
        for gx in 0..m {
            let sx = bx[0] + (gx as f32 + 0.5) * bw / m as f32;
            let px = (sx.floor() as isize).clamp(0, w as isize - 1) as usize;
            out.data_mut()[gy * m + gx] = gt_mask.data()[py * w + px];
        }
    }
    out
}

pub fn train_vp(
    dataset: &Dataset,
    decoder: Option<(&DecoderWeights, &RidgeMap)>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(VpModel, VpTrainLog)> {
    let mode = cfg.vp.fusion;
    let dims = VpDims::from_run(cfg);
    if mode != FusionMode::None && dataset.voxels.shape()[1] != cfg.dims.voxel_dim {
        return Err(Error::Config {
            key: "dims.voxel_dim".into(),
            msg: "fused training requires voxel data matching the config".into(),
        });
    }

    let voxel_path = match mode {
        FusionMode::None => None,
        _ => {
            let (dec, ridge) = match decoder {
                Some((d, r)) => (d.clone(), r.clone()),
                None => {
                    // no pretraining: the whole voxel path starts untrained,
                    // including the input map (a seeded random projection in
                    // place of the fitted ridge)
                    let mut rng = rng_from(seed, STREAM_DEC_INIT);
                    let dec = DecoderWeights::init(
                        crate::decoder::DecoderDims::from_run(&cfg.dims),
                        &mut rng,
                    );
                    let ridge = RidgeMap {
                        weights: Tensor::randn(
                            &[cfg.dims.voxel_dim, cfg.dims.decoder_input_dim],
                            1.0 / (cfg.dims.voxel_dim as f32).sqrt(),
                            &mut rng,
                        ),
                        lambda: cfg.pretrain.ridge_lambda,
                    };
                    (dec, ridge)
                }
            };
            let mut rng = rng_from(seed, STREAM_LORA);
            let adapters = DecoderAdapters::init(
                &dec,
                cfg.vp.lora_rank,
                AttachPoints::default(),
                &mut rng,
            )?;
            Some(VoxelPath {
                decoder: dec,
                ridge,
                adapters: Some(adapters),
            })
        }
    };

    let mut vp = VpWeights::init(dims, mode, &mut rng_from(seed, STREAM_VP_INIT));
    let mut log = VpTrainLog {
        seed,
        config_hash: cfg.hash(),
        fusion: mode.to_string(),
        lora_rank: cfg.vp.lora_rank,
        entries: Vec::with_capacity(cfg.vp.epochs),
    };

    let shapes = vp_param_shapes(&vp, voxel_path.as_ref().and_then(|v| v.adapters.as_ref()));
    let mut opt = Sgd::new(&shapes, cfg.vp.momentum, cfg.vp.weight_decay);
    let mut theta_velocity = 0.0f32;

    let n = dataset.len();
    let gts: Vec<GtImage> = (0..n).map(|i| gather_gt(dataset, i)).collect();
    let mut voxel_path = voxel_path;

    for epoch in 0..cfg.vp.epochs {
        let lr = step_lr(
            cfg.vp.lr,
            epoch,
            cfg.vp.epochs,
            cfg.vp.lr_step_fraction,
            cfg.vp.lr_gamma,
        );
        let order = epoch_batches(n, 1, mix_seed(seed, 0x7670_7368), epoch)?;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (step, batch) in order.iter().enumerate() {
            let img_idx = batch[0];
            let stats = train_step(
                dataset,
                &gts[img_idx],
                img_idx,
                &mut vp,
                &mut voxel_path,
                cfg,
                seed,
                epoch,
                step,
                &mut opt,
                &mut theta_velocity,
                lr,
            )?;
            if !stats.3.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    msg: format!("rpn {} roi {} mask {}", stats.0, stats.1, stats.2),
                });
            }
            sums.0 += stats.0 as f64;
            sums.1 += stats.1 as f64;
            sums.2 += stats.2 as f64;
            sums.3 += stats.3 as f64;
        }
        let nb = n.max(1) as f64;
        let l_rpn = (sums.0 / nb) as f32;
        let l_roi = (sums.1 / nb) as f32;
        let l_mask = (sums.2 / nb) as f32;
        log.entries.push(VpEpochLog {
            epoch,
            l_det: l_rpn + l_roi,
            l_det_rpn: l_rpn,
            l_det_roi: l_roi,
            l_mask,
            total: (sums.3 / nb) as f32,
            lr,
        });
    }

    Ok((
        VpModel {
            mode,
            vp,
            voxel_path,
        },
        log,
    ))
}

/// One SGD step on one image. Returns (l_rpn, l_roi, l_mask, total).
#[allow(clippy::too_many_arguments)]
fn train_step(
    dataset: &Dataset,
    gt: &GtImage,
    img_idx: usize,
    vp: &mut VpWeights,
    voxel_path: &mut Option<VoxelPath>,
    cfg: &RunConfig,
    seed: u64,
    epoch: usize,
    step: usize,
    opt: &mut Sgd,
    theta_velocity: &mut f32,
    lr: f32,
) -> Result<(f32, f32, f32, f32)> {
    let dims = vp.dims;
    let image = dataset.image(img_idx);
    let m = dims.mask_size;
    let p = dims.roi_size;

    // voxel tokens (fused modes only)
    let (tokens, dec_cache) = match voxel_path {
        Some(path) => {
            let voxel = dataset.voxel(img_idx);
            let d_v = voxel.len();
            let m_in = path.ridge.apply(&voxel.reshaped(&[1, d_v])?)?;
            let (z, cache) = decoder_forward(&path.decoder, &m_in, path.adapters.as_ref())?;
            (
                Some(z.reshaped(&[dims.tokens, dims.token_dim])?),
                Some(cache),
            )
        }
        None => (None, None),
    };

    let (levels, bb_cache) = image_backbone(vp, &image)?;
    let rpn_out = rpn_forward(vp, &levels)?;
    let (fused, fusion_cache) = apply_fusion(vp, &levels, tokens.as_ref())?;

    // ---- RPN loss over non-ignored anchors
    let (labels_all, ignore_all, deltas_all) =
        rpn_targets(&dims, gt, cfg.vp.positive_iou, cfg.vp.negative_iou);
    let mut level_views = Vec::with_capacity(LEVELS);
    let mut offset = 0usize;
    let mut keep_rows: Vec<usize> = Vec::new();
    let mut rpn_logits_rows: Vec<f32> = Vec::new();
    let mut rpn_delta_rows: Vec<f32> = Vec::new();
    let mut rpn_labels: Vec<usize> = Vec::new();
    let mut rpn_targets_rows: Vec<f32> = Vec::new();
    for raw in rpn_out.raw.iter() {
        let (logits, deltas) = rpn_level_view(raw);
        let count = logits.shape()[0];
        for i in 0..count {
            let a = offset + i;
            if ignore_all[a] {
                continue;
            }
            keep_rows.push(a);
            rpn_logits_rows.extend_from_slice(&logits.data()[i * 2..(i + 1) * 2]);
            rpn_delta_rows.extend_from_slice(&deltas.data()[i * 4..(i + 1) * 4]);
            rpn_labels.push(labels_all[a]);
            rpn_targets_rows.extend_from_slice(&deltas_all[a]);
        }
        level_views.push((logits, deltas, count));
        offset += count;
    }
    let r_rpn = rpn_labels.len();
    let rpn_logits_t = Tensor::from_vec(&[r_rpn, 2], rpn_logits_rows)?;
    let rpn_deltas_t = Tensor::from_vec(&[r_rpn, 4], rpn_delta_rows)?;
    let rpn_targets_t = Tensor::from_vec(&[r_rpn, 4], rpn_targets_rows)?;
    let rpn_probs = ops::softmax_rows(&rpn_logits_t, 1.0)?;
    let l_rpn = losses::det_loss(
        &rpn_probs,
        &rpn_labels,
        &rpn_deltas_t,
        &rpn_targets_t,
        cfg.vp.lambda_reg,
    )?;

    // ---- proposals and RoI sampling
    let proposals = rpn_propose(
        &dims,
        &rpn_out,
        cfg.vp.rpn_pre_nms,
        cfg.vp.rpn_post_nms,
        cfg.vp.rpn_nms_iou,
    )?;
    let prop_boxes: Vec<BoxXyxy> = proposals.iter().map(|p| p.box_xyxy).collect();
    let mut roi_rng = rng_from(
        mix_seed(seed, STREAM_ROI),
        (epoch * 1_000_003 + step) as u64,
    );
    let rois = sample_rois(&prop_boxes, gt, cfg, &mut roi_rng);

    // ---- box head over sampled RoIs
    let n_roi = rois.len();
    let c1 = dims.categories + 1;
    let mut roi_feats = Vec::with_capacity(n_roi);
    let mut box_caches = Vec::with_capacity(n_roi);
    let mut cls_logits = Tensor::zeros(&[n_roi, c1]);
    let mut box_preds = Tensor::zeros(&[n_roi, 4]);
    let mut box_targets = Tensor::zeros(&[n_roi, 4]);
    let mut roi_labels = Vec::with_capacity(n_roi);
    for (i, roi) in rois.iter().enumerate() {
        let feat = roi_align(&fused[roi.level], &roi.bx, STRIDES[roi.level], p)?;
        let (cls, deltas, cache) = box_head_forward(vp, &feat)?;
        cls_logits.data_mut()[i * c1..(i + 1) * c1].copy_from_slice(cls.data());
        box_preds.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(deltas.data());
        box_targets.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(&roi.box_target);
        roi_labels.push(roi.label);
        roi_feats.push(feat);
        box_caches.push(cache);
    }
    let cls_probs = if n_roi > 0 {
        ops::softmax_rows(&cls_logits, 1.0)?
    } else {
        Tensor::zeros(&[0, c1])
    };
    let l_roi = losses::det_loss(
        &cls_probs,
        &roi_labels,
        &box_preds,
        &box_targets,
        cfg.vp.lambda_reg,
    )?;

    // ---- mask head over (capped) positives
    let mask_ids: Vec<usize> = (0..n_roi)
        .filter(|&i| rois[i].label > 0)
        .take(MASK_CAP)
        .collect();
    let n_mask = mask_ids.len();
    let mut mask_probs = Tensor::zeros(&[n_mask, dims.categories, m, m]);
    let mut mask_gts = Tensor::zeros(&[n_mask, m, m]);
    let mut mask_labels = Vec::with_capacity(n_mask);
    let mut mask_caches = Vec::with_capacity(n_mask);
    for (slot, &i) in mask_ids.iter().enumerate() {
        let (logits, cache) = mask_head_forward(vp, &roi_feats[i])?;
        let probs = ops::sigmoid(&logits);
        let len = dims.categories * m * m;
        mask_probs.data_mut()[slot * len..(slot + 1) * len].copy_from_slice(probs.data());
        let gt_mask = mask_target(&gt.masks[rois[i].gt_index], &rois[i].bx, m);
        mask_gts.data_mut()[slot * m * m..(slot + 1) * m * m].copy_from_slice(gt_mask.data());
        mask_labels.push(rois[i].label);
        mask_caches.push((cache, probs));
    }
    let l_mask = losses::mask_loss(&mask_probs, &mask_labels, &mask_gts)?;

    let total = l_rpn.scalar + l_roi.scalar + l_mask.scalar;

    // =================== backward ===================
    let mut grads = vp.zero_grads();
    let mut d_fused: Vec<Tensor> = fused.iter().map(|f| Tensor::zeros(f.shape())).collect();

    // mask loss → mask heads → RoI features
    if n_mask > 0 {
        let d_probs_all = losses::mask_loss_grad(&mask_probs, &mask_labels, &mask_gts)?;
        let len = dims.categories * m * m;
        for (slot, &i) in mask_ids.iter().enumerate() {
            let d_probs = Tensor::from_vec(
                &[dims.categories, m, m],
                d_probs_all.data()[slot * len..(slot + 1) * len].to_vec(),
            )?;
            let (cache, probs) = &mask_caches[slot];
            let d_logits = ops::sigmoid_vjp(probs, &d_probs)?;
            let d_roi = mask_head_backward(vp, cache, &d_logits, &mut grads)?;
            roi_align_vjp(
                fused[rois[i].level].shape(),
                &rois[i].bx,
                STRIDES[rois[i].level],
                p,
                &d_roi,
                &mut d_fused[rois[i].level],
            )?;
        }
    }

    // roi det loss → box heads → RoI features
    if n_roi > 0 {
        let (d_probs, d_boxes) = losses::det_loss_grad(
            &cls_probs,
            &roi_labels,
            &box_preds,
            &box_targets,
            cfg.vp.lambda_reg,
        )?;
        let d_logits = ops::softmax_rows_vjp(&cls_probs, &d_probs, 1.0)?;
        for (i, roi) in rois.iter().enumerate() {
            let d_cls = Tensor::from_vec(&[c1], d_logits.data()[i * c1..(i + 1) * c1].to_vec())?;
            let d_del = Tensor::from_vec(&[4], d_boxes.data()[i * 4..(i + 1) * 4].to_vec())?;
            let d_roi = box_head_backward(vp, &box_caches[i], &d_cls, &d_del, &mut grads)?;
            roi_align_vjp(
                fused[roi.level].shape(),
                &roi.bx,
                STRIDES[roi.level],
                p,
                &d_roi,
                &mut d_fused[roi.level],
            )?;
        }
    }

    // fusion backward → raw levels + decoder tokens
    let (mut d_levels, d_tokens) =
        fusion_backward(vp, &levels, tokens.as_ref(), &fusion_cache, &d_fused, &mut grads)?;

    // rpn loss backward → raw levels
    {
        let (d_probs, d_deltas_k) = losses::det_loss_grad(
            &rpn_probs,
            &rpn_labels,
            &rpn_deltas_t,
            &rpn_targets_t,
            cfg.vp.lambda_reg,
        )?;
        let d_logits_k = ops::softmax_rows_vjp(&rpn_probs, &d_probs, 1.0)?;
        // scatter compact rows back per level
        let mut row = 0usize;
        let mut offset = 0usize;
        for (level, (_, _, count)) in level_views.iter().enumerate() {
            let side = dims.level_side(level);
            let mut d_logits_full = Tensor::zeros(&[*count, 2]);
            let mut d_deltas_full = Tensor::zeros(&[*count, 4]);
            while row < keep_rows.len() && keep_rows[row] < offset + count {
                let local = keep_rows[row] - offset;
                d_logits_full.data_mut()[local * 2..(local + 1) * 2]
                    .copy_from_slice(&d_logits_k.data()[row * 2..(row + 1) * 2]);
                d_deltas_full.data_mut()[local * 4..(local + 1) * 4]
                    .copy_from_slice(&d_deltas_k.data()[row * 4..(row + 1) * 4]);
                row += 1;
            }
            let d_raw = rpn_level_view_vjp(&d_logits_full, &d_deltas_full, side, side);
            let d_level = vp.rpn.vjp(&levels[level], &d_raw, &mut grads.rpn)?;
            ops::axpy(&mut d_levels[level], 1.0, &d_level)?;
            offset += count;
        }
    }

    // backbone backward
    backbone_backward(vp, &bb_cache, &d_levels, &mut grads)?;

    // decoder adapters backward
    let mut adapter_grads: Option<DecoderAdapterGrads> = None;
    if let (Some(path), Some(d_tok), Some(cache)) = (&*voxel_path, d_tokens, dec_cache.as_ref()) {
        if let Some(adapters) = &path.adapters {
            let mut agrads = adapters.zero_grads();
            let d_zrows = d_tok.reshaped(&[dims.tokens, dims.token_dim])?;
            decoder_backward_adapted(&path.decoder, adapters, cache, &d_zrows, &mut agrads)?;
            adapter_grads = Some(agrads);
        }
    }

    apply_vp_step(
        opt,
        vp,
        &grads,
        voxel_path.as_mut().and_then(|v| v.adapters.as_mut()),
        adapter_grads.as_ref(),
        theta_velocity,
        cfg.vp.momentum,
        lr,
    );

    Ok((l_rpn.scalar, l_roi.scalar, l_mask.scalar, total))
}

/// Fixed ordering of trainable parameters. The decoder base is not listed:
/// only adapters, fusion and perceptron weights ever reach the optimizer.
fn vp_param_shapes(vp: &VpWeights, adapters: Option<&DecoderAdapters>) -> Vec<Vec<usize>> {
    let mut shapes: Vec<Vec<usize>> = vp
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    if let Some(ad) = adapters {
        if let Some(t) = &ad.tokenizer {
            shapes.push(t.a.shape().to_vec());
            shapes.push(t.b.shape().to_vec());
        }
        for (a1, a2) in &ad.blocks {
            shapes.push(a1.a.shape().to_vec());
            shapes.push(a1.b.shape().to_vec());
            shapes.push(a2.a.shape().to_vec());
            shapes.push(a2.b.shape().to_vec());
        }
    }
    shapes
}

#[allow(clippy::too_many_arguments)]
fn apply_vp_step(
    opt: &mut Sgd,
    vp: &mut VpWeights,
    grads: &VpGrads,
    adapters: Option<&mut DecoderAdapters>,
    adapter_grads: Option<&DecoderAdapterGrads>,
    theta_velocity: &mut f32,
    momentum: f32,
    lr: f32,
) {
    let mut pairs: Vec<(&mut Tensor, &Tensor)> = Vec::new();
    pairs.push((&mut vp.stem.w, &grads.stem.w));
    pairs.push((&mut vp.stem.b, &grads.stem.b));
    for (c, g) in vp.down.iter_mut().zip(grads.down.iter()) {
        pairs.push((&mut c.w, &g.w));
        pairs.push((&mut c.b, &g.b));
    }
    for (c, g) in vp.laterals.iter_mut().zip(grads.laterals.iter()) {
        pairs.push((&mut c.w, &g.w));
        pairs.push((&mut c.b, &g.b));
    }
    pairs.push((&mut vp.rpn.w, &grads.rpn.w));
    pairs.push((&mut vp.rpn.b, &grads.rpn.b));
    pairs.push((&mut vp.box_reduce.w, &grads.box_reduce.w));
    pairs.push((&mut vp.box_reduce.b, &grads.box_reduce.b));
    pairs.push((&mut vp.box_fc.w, &grads.box_fc.w));
    pairs.push((&mut vp.box_fc.b, &grads.box_fc.b));
    pairs.push((&mut vp.cls_out.w, &grads.cls_out.w));
    pairs.push((&mut vp.cls_out.b, &grads.cls_out.b));
    pairs.push((&mut vp.box_out.w, &grads.box_out.w));
    pairs.push((&mut vp.box_out.b, &grads.box_out.b));
    pairs.push((&mut vp.mask_reduce.w, &grads.mask_reduce.w));
    pairs.push((&mut vp.mask_reduce.b, &grads.mask_reduce.b));
    pairs.push((&mut vp.mask_conv1.w, &grads.mask_conv1.w));
    pairs.push((&mut vp.mask_conv1.b, &grads.mask_conv1.b));
    pairs.push((&mut vp.mask_conv2.w, &grads.mask_conv2.w));
    pairs.push((&mut vp.mask_conv2.b, &grads.mask_conv2.b));
    pairs.push((&mut vp.mask_out.w, &grads.mask_out.w));
    pairs.push((&mut vp.mask_out.b, &grads.mask_out.b));
    if let (Some(f), Some(fg)) = (vp.fusion.as_mut(), grads.fusion.as_ref()) {
        pairs.push((&mut f.w_q, &fg.w_q));
        pairs.push((&mut f.w_k, &fg.w_k));
        pairs.push((&mut f.w_v, &fg.w_v));
        pairs.push((&mut f.w_o, &fg.w_o));
        pairs.push((&mut f.gamma, &fg.gamma));
        pairs.push((&mut f.beta, &fg.beta));
    }
    if let (Some(c), Some(cg)) = (vp.concat.as_mut(), grads.concat.as_ref()) {
        pairs.push((&mut c.summary.w, &cg.summary.w));
        pairs.push((&mut c.summary.b, &cg.summary.b));
        pairs.push((&mut c.proj.w, &cg.proj.w));
        pairs.push((&mut c.proj.b, &cg.proj.b));
    }
    let zero_adapter_grads;
    if let Some(ad) = adapters {
        let ag = match adapter_grads {
            Some(g) => g,
            None => {
                zero_adapter_grads = ad.zero_grads();
                &zero_adapter_grads
            }
        };
        if let (Some(t), Some(tg)) = (ad.tokenizer.as_mut(), ag.tokenizer.as_ref()) {
            pairs.push((&mut t.a, &tg.0));
            pairs.push((&mut t.b, &tg.1));
        }
        for ((a1, a2), (g1, g2)) in ad.blocks.iter_mut().zip(ag.blocks.iter()) {
            pairs.push((&mut a1.a, &g1.0));
            pairs.push((&mut a1.b, &g1.1));
            pairs.push((&mut a2.a, &g2.0));
            pairs.push((&mut a2.b, &g2.1));
        }
    }
    opt.step(&mut pairs, lr);

    // learnable temperature: plain momentum step, no weight decay
    if let (Some(f), Some(fg)) = (vp.fusion.as_mut(), grads.fusion.as_ref()) {
        *theta_velocity = momentum * *theta_velocity + fg.theta;
        f.theta -= lr * *theta_velocity;
    }
}
