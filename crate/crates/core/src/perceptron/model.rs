//! Visual perceptron: toy convolutional pyramid with top-down lateral
//! merging, a one-anchor-per-cell proposal head, RoI heads for
//! classification / box regression / masks, and the voxel-fusion variants
//! applied to every level before RoI pooling.

use rand_chacha::ChaCha8Rng;

use crate::config::{FusionMode, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse_level, fuse_level_vjp, CrossAttnBlock, CrossAttnGrads, FuseCache};
use crate::nn::{Conv2d, Conv2dGrads, Linear, LinearGrads};
use crate::perceptron::boxes::BoxXyxy;
use crate::tensor::{ops, Tensor};

pub const STRIDES: [usize; 3] = [4, 8, 16];
pub const LEVELS: usize = 3;
/// Backbone channel widths leading up to the laterals.
const WIDTHS: [usize; 5] = [16, 24, 32, 48, 64];
/// Channel width of the RoI-head reductions.
const HEAD_C: usize = 16;
const BOX_FC: usize = 96;
/// Channels appended by the concat ("feature stitching") variant.
const CONCAT_C: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct VpDims {
    pub image_size: usize,
    pub image_channels: usize,
    pub fpn_dim: usize,
    pub attn_dim: usize,
    pub categories: usize,
    pub roi_size: usize,
    pub mask_size: usize,
    pub tokens: usize,
    pub token_dim: usize,
}

impl VpDims {
    pub fn from_run(cfg: &RunConfig) -> Self {
        VpDims {
            image_size: cfg.dims.image_size,
            image_channels: cfg.dims.image_channels,
            fpn_dim: cfg.dims.fpn_dim,
            attn_dim: cfg.dims.attn_dim,
            categories: cfg.generator.categories,
            roi_size: cfg.dims.roi_size,
            mask_size: cfg.dims.mask_size,
            tokens: cfg.dims.tokens,
            token_dim: cfg.dims.token_dim,
        }
    }

    pub fn level_side(&self, level: usize) -> usize {
        self.image_size / STRIDES[level]
    }
}

/// Learned linear summary of the tokens broadcast to every cell, channel
/// concatenation, then a 1x1 projection back to d.
#[derive(Debug, Clone)]
pub struct ConcatFusion {
    pub summary: Linear,
    pub proj: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ConcatFusionGrads {
    pub summary: LinearGrads,
    pub proj: Conv2dGrads,
}

#[derive(Debug, Clone)]
pub struct VpWeights {
    pub dims: VpDims,
    pub stem: Conv2d,
    pub down: Vec<Conv2d>, // 4 stride-2 convs
    pub laterals: Vec<Conv2d>,
    pub rpn: Conv2d, // 1x1 d → 6 (2 objectness logits + 4 deltas)
    pub box_reduce: Conv2d,
    pub box_fc: Linear,
    pub cls_out: Linear,
    pub box_out: Linear,
    pub mask_reduce: Conv2d,
    pub mask_conv1: Conv2d,
    pub mask_conv2: Conv2d,
    pub mask_out: Conv2d,
    pub fusion: Option<CrossAttnBlock>,
    pub concat: Option<ConcatFusion>,
}

#[derive(Debug)]
pub struct VpGrads {
    pub stem: Conv2dGrads,
    pub down: Vec<Conv2dGrads>,
    pub laterals: Vec<Conv2dGrads>,
    pub rpn: Conv2dGrads,
    pub box_reduce: Conv2dGrads,
    pub box_fc: LinearGrads,
    pub cls_out: LinearGrads,
    pub box_out: LinearGrads,
    pub mask_reduce: Conv2dGrads,
    pub mask_conv1: Conv2dGrads,
    pub mask_conv2: Conv2dGrads,
    pub mask_out: Conv2dGrads,
    pub fusion: Option<CrossAttnGrads>,
    pub concat: Option<ConcatFusionGrads>,
}

impl VpWeights {
    pub fn init(dims: VpDims, mode: FusionMode, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.fpn_dim;
        let p = dims.roi_size;
        let c1 = dims.categories + 1;
        let stem = Conv2d::init(dims.image_channels, WIDTHS[0], 3, 1, 1, rng);
        let down = (0..4)
            .map(|i| Conv2d::init(WIDTHS[i], WIDTHS[i + 1], 3, 2, 1, rng))
            .collect();
        let laterals = (0..LEVELS)
            .map(|i| Conv2d::init(WIDTHS[i + 2], d, 1, 1, 0, rng))
            .collect();
        let fusion = if mode == FusionMode::CrossAttn {
            Some(CrossAttnBlock::init(d, dims.attn_dim, dims.token_dim, rng))
        } else {
            None
        };
        let concat = if mode == FusionMode::Concat {
            Some(ConcatFusion {
                summary: Linear::init(dims.token_dim, CONCAT_C, rng),
                proj: Conv2d::init(d + CONCAT_C, d, 1, 1, 0, rng),
            })
        } else {
            None
        };
        VpWeights {
            dims,
            stem,
            down,
            laterals,
            rpn: Conv2d::init(d, 6, 1, 1, 0, rng),
            box_reduce: Conv2d::init(d, HEAD_C, 1, 1, 0, rng),
            box_fc: Linear::init(HEAD_C * p * p, BOX_FC, rng),
            cls_out: Linear::init(BOX_FC, c1, rng),
            box_out: Linear::init(BOX_FC, 4, rng),
            mask_reduce: Conv2d::init(d, HEAD_C, 1, 1, 0, rng),
            mask_conv1: Conv2d::init(HEAD_C, HEAD_C, 3, 1, 1, rng),
            mask_conv2: Conv2d::init(HEAD_C, HEAD_C, 3, 1, 1, rng),
            mask_out: Conv2d::init(HEAD_C, dims.categories, 1, 1, 0, rng),
            fusion,
            concat,
        }
    }

    pub fn zero_grads(&self) -> VpGrads {
        VpGrads {
            stem: self.stem.zero_grads(),
            down: self.down.iter().map(|c| c.zero_grads()).collect(),
            laterals: self.laterals.iter().map(|c| c.zero_grads()).collect(),
            rpn: self.rpn.zero_grads(),
            box_reduce: self.box_reduce.zero_grads(),
            box_fc: self.box_fc.zero_grads(),
            cls_out: self.cls_out.zero_grads(),
            box_out: self.box_out.zero_grads(),
            mask_reduce: self.mask_reduce.zero_grads(),
            mask_conv1: self.mask_conv1.zero_grads(),
            mask_conv2: self.mask_conv2.zero_grads(),
            mask_out: self.mask_out.zero_grads(),
            fusion: self.fusion.as_ref().map(|f| f.zero_grads()),
            concat: self.concat.as_ref().map(|c| ConcatFusionGrads {
                summary: c.summary.zero_grads(),
                proj: c.proj.zero_grads(),
            }),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("stem.w".into(), &self.stem.w),
            ("stem.b".into(), &self.stem.b),
        ];
        for (i, c) in self.down.iter().enumerate() {
            out.push((format!("down{i}.w"), &c.w));
            out.push((format!("down{i}.b"), &c.b));
        }
        for (i, c) in self.laterals.iter().enumerate() {
            out.push((format!("lat{i}.w"), &c.w));
            out.push((format!("lat{i}.b"), &c.b));
        }
        for (name, t) in [
            ("rpn.w", &self.rpn.w),
            ("rpn.b", &self.rpn.b),
            ("box_reduce.w", &self.box_reduce.w),
            ("box_reduce.b", &self.box_reduce.b),
            ("box_fc.w", &self.box_fc.w),
            ("box_fc.b", &self.box_fc.b),
            ("cls_out.w", &self.cls_out.w),
            ("cls_out.b", &self.cls_out.b),
            ("box_out.w", &self.box_out.w),
            ("box_out.b", &self.box_out.b),
            ("mask_reduce.w", &self.mask_reduce.w),
            ("mask_reduce.b", &self.mask_reduce.b),
            ("mask_conv1.w", &self.mask_conv1.w),
            ("mask_conv1.b", &self.mask_conv1.b),
            ("mask_conv2.w", &self.mask_conv2.w),
            ("mask_conv2.b", &self.mask_conv2.b),
            ("mask_out.w", &self.mask_out.w),
            ("mask_out.b", &self.mask_out.b),
        ] {
            out.push((name.into(), t));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.w_q".into(), &f.w_q));
            out.push(("fusion.w_k".into(), &f.w_k));
            out.push(("fusion.w_v".into(), &f.w_v));
            out.push(("fusion.w_o".into(), &f.w_o));
            out.push(("fusion.gamma".into(), &f.gamma));
            out.push(("fusion.beta".into(), &f.beta));
        }
        if let Some(c) = &self.concat {
            out.push(("concat.summary.w".into(), &c.summary.w));
            out.push(("concat.summary.b".into(), &c.summary.b));
            out.push(("concat.proj.w".into(), &c.proj.w));
            out.push(("concat.proj.b".into(), &c.proj.b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("stem.w".into(), &mut self.stem.w),
            ("stem.b".into(), &mut self.stem.b),
        ];
        for (i, c) in self.down.iter_mut().enumerate() {
            out.push((format!("down{i}.w"), &mut c.w));
            out.push((format!("down{i}.b"), &mut c.b));
        }
        for (i, c) in self.laterals.iter_mut().enumerate() {
            out.push((format!("lat{i}.w"), &mut c.w));
            out.push((format!("lat{i}.b"), &mut c.b));
        }
        out.push(("rpn.w".into(), &mut self.rpn.w));
        out.push(("rpn.b".into(), &mut self.rpn.b));
        out.push(("box_reduce.w".into(), &mut self.box_reduce.w));
        out.push(("box_reduce.b".into(), &mut self.box_reduce.b));
        out.push(("box_fc.w".into(), &mut self.box_fc.w));
        out.push(("box_fc.b".into(), &mut self.box_fc.b));
        out.push(("cls_out.w".into(), &mut self.cls_out.w));
        out.push(("cls_out.b".into(), &mut self.cls_out.b));
        out.push(("box_out.w".into(), &mut self.box_out.w));
        out.push(("box_out.b".into(), &mut self.box_out.b));
        out.push(("mask_reduce.w".into(), &mut self.mask_reduce.w));
        out.push(("mask_reduce.b".into(), &mut self.mask_reduce.b));
        out.push(("mask_conv1.w".into(), &mut self.mask_conv1.w));
        out.push(("mask_conv1.b".into(), &mut self.mask_conv1.b));
        out.push(("mask_conv2.w".into(), &mut self.mask_conv2.w));
        out.push(("mask_conv2.b".into(), &mut self.mask_conv2.b));
        out.push(("mask_out.w".into(), &mut self.mask_out.w));
        out.push(("mask_out.b".into(), &mut self.mask_out.b));
        if let Some(f) = &mut self.fusion {
            out.push(("fusion.w_q".into(), &mut f.w_q));
            out.push(("fusion.w_k".into(), &mut f.w_k));
            out.push(("fusion.w_v".into(), &mut f.w_v));
            out.push(("fusion.w_o".into(), &mut f.w_o));
            out.push(("fusion.gamma".into(), &mut f.gamma));
            out.push(("fusion.beta".into(), &mut f.beta));
        }
        if let Some(c) = &mut self.concat {
            out.push(("concat.summary.w".into(), &mut c.summary.w));
            out.push(("concat.summary.b".into(), &mut c.summary.b));
            out.push(("concat.proj.w".into(), &mut c.proj.w));
            out.push(("concat.proj.b".into(), &mut c.proj.b));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

pub struct BackboneCache {
    pub image: Tensor,
    conv_in: Vec<Tensor>,   // input of stem + each down conv
    preact: Vec<Tensor>,    // pre-relu outputs
    relu_out: Vec<Tensor>,  // post-relu outputs (c1..c5)
    lat_out: Vec<Tensor>,   // lateral outputs before top-down merge
}

/// Three-level feature pyramid from a [C,S,S] image.
pub fn image_backbone(w: &VpWeights, image: &Tensor) -> Result<(Vec<Tensor>, BackboneCache)> {
    let s = image.shape();
    if s.len() != 3 || s[1] % STRIDES[LEVELS - 1] != 0 || s[2] % STRIDES[LEVELS - 1] != 0 {
        return Err(Error::domain(
            "image_backbone",
            format!("image dims {s:?} must be divisible by {}", STRIDES[LEVELS - 1]),
        ));
    }
    let mut conv_in = Vec::with_capacity(5);
    let mut preact = Vec::with_capacity(5);
    let mut relu_out = Vec::with_capacity(5);
    let mut x = image.clone();
    for conv in std::iter::once(&w.stem).chain(w.down.iter()) {
        conv_in.push(x.clone());
        let h = conv.forward(&x)?;
        let r = ops::relu(&h);
        preact.push(h);
        relu_out.push(r.clone());
        x = r;
    }
    // laterals on c3/c4/c5 (= relu_out[2..5])
    let lat_out: Vec<Tensor> = (0..LEVELS)
        .map(|i| w.laterals[i].forward(&relu_out[i + 2]))
        .collect::<Result<_>>()?;
    // top-down merge
    let p5 = lat_out[2].clone();
    let p4 = ops::add(&lat_out[1], &ops::upsample_nearest2x(&p5)?)?;
    let p3 = ops::add(&lat_out[0], &ops::upsample_nearest2x(&p4)?)?;
    Ok((
        vec![p3, p4, p5],
        BackboneCache {
            image: image.clone(),
            conv_in,
            preact,
            relu_out,
            lat_out,
        },
    ))
}

/// Backward through laterals + conv stack given per-level gradients.
pub fn backbone_backward(
    w: &VpWeights,
    cache: &BackboneCache,
    d_levels: &[Tensor],
    grads: &mut VpGrads,
) -> Result<()> {
    // top-down merge backward
    let d_p3 = &d_levels[0];
    let d_lat3 = d_p3.clone();
    let mut d_p4 = d_levels[1].clone();
    ops::axpy(
        &mut d_p4,
        1.0,
        &ops::upsample_nearest2x_vjp(cache.lat_out[1].shape(), d_p3)?,
    )?;
    let d_lat4 = d_p4.clone();
    let mut d_p5 = d_levels[2].clone();
    ops::axpy(
        &mut d_p5,
        1.0,
        &ops::upsample_nearest2x_vjp(cache.lat_out[2].shape(), &d_p4)?,
    )?;
    let d_lat5 = d_p5;

    // laterals into c3..c5 gradients
    let mut d_relu: Vec<Option<Tensor>> = vec![None; 5];
    for (i, d_lat) in [d_lat3, d_lat4, d_lat5].into_iter().enumerate() {
        let d = w.laterals[i].vjp(&cache.relu_out[i + 2], &d_lat, &mut grads.laterals[i])?;
        d_relu[i + 2] = Some(d);
    }

    // conv stack backward, accumulating skip contributions downward
    let mut carry: Option<Tensor> = None;
    for i in (0..5).rev() {
        let mut d_out = match (carry.take(), d_relu[i].take()) {
            (Some(mut a), Some(b)) => {
                ops::axpy(&mut a, 1.0, &b)?;
                a
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => continue,
        };
        d_out = ops::relu_vjp(&cache.preact[i], &d_out)?;
        let conv = if i == 0 { &w.stem } else { &w.down[i - 1] };
        let cgrads = if i == 0 {
            &mut grads.stem
        } else {
            &mut grads.down[i - 1]
        };
        let d_in = conv.vjp(&cache.conv_in[i], &d_out, cgrads)?;
        if i > 0 {
            carry = Some(d_in);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fusion application
// ---------------------------------------------------------------------------

/// [d,H,W] → [H·W, d] rows.
pub fn level_to_rows(level: &Tensor) -> Tensor {
    let (d, h, w) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    let mut rows = Tensor::zeros(&[h * w, d]);
    for c in 0..d {
        for i in 0..h * w {
            let v = level.data()[c * h * w + i];
            rows.data_mut()[i * d + c] = v;
        }
    }
    rows
}

pub fn rows_to_level(rows: &Tensor, d: usize, h: usize, w: usize) -> Tensor {
    let mut level = Tensor::zeros(&[d, h, w]);
    for c in 0..d {
        for i in 0..h * w {
            let v = rows.data()[i * d + c];
            level.data_mut()[c * h * w + i] = v;
        }
    }
    level
}

pub enum FusionCache {
    None,
    CrossAttn {
        rows: Vec<Tensor>,
        caches: Vec<FuseCache>,
        /// per-level attention [N_l, T]
        pub_attn: Vec<Tensor>,
    },
    Concat {
        token_mean: Tensor,
        summary: Tensor,
        concat_in: Vec<Tensor>,
    },
}

/// Apply the configured fusion variant to every level. `tokens` is the
/// decoder output [T, D]; required unless the mode is None.
pub fn apply_fusion(
    w: &VpWeights,
    levels: &[Tensor],
    tokens: Option<&Tensor>,
) -> Result<(Vec<Tensor>, FusionCache)> {
    match (&w.fusion, &w.concat) {
        (Some(block), _) => {
            let z = tokens.ok_or_else(|| {
                Error::domain("apply_fusion", "cross-attn fusion requires voxel tokens")
            })?;
            let mut fused_levels = Vec::with_capacity(levels.len());
            let mut rows_v = Vec::with_capacity(levels.len());
            let mut caches = Vec::with_capacity(levels.len());
            let mut attn_v = Vec::with_capacity(levels.len());
            for level in levels {
                let (d, h, wd) = (level.shape()[0], level.shape()[1], level.shape()[2]);
                let rows = level_to_rows(level);
                let (fused_rows, attn, cache) = fuse_level(&rows, z, block)?;
                fused_levels.push(rows_to_level(&fused_rows, d, h, wd));
                rows_v.push(rows);
                caches.push(cache);
                attn_v.push(attn);
            }
            Ok((
                fused_levels,
                FusionCache::CrossAttn {
                    rows: rows_v,
                    caches,
                    pub_attn: attn_v,
                },
            ))
        }
        (None, Some(cf)) => {
            let z = tokens.ok_or_else(|| {
                Error::domain("apply_fusion", "concat fusion requires voxel tokens")
            })?;
            let token_mean = ops::mean_rows(z).reshaped(&[1, z.cols_2d()])?;
            let summary = cf.summary.forward(&token_mean)?; // [1, CONCAT_C]
            let mut fused = Vec::with_capacity(levels.len());
            let mut concat_in = Vec::with_capacity(levels.len());
            for level in levels {
                let (d, h, wd) = (level.shape()[0], level.shape()[1], level.shape()[2]);
                let mut cat = Tensor::zeros(&[d + CONCAT_C, h, wd]);
                cat.data_mut()[..d * h * wd].copy_from_slice(level.data());
                for c in 0..CONCAT_C {
                    let v = summary.data()[c];
                    for px in 0..h * wd {
                        cat.data_mut()[(d + c) * h * wd + px] = v;
                    }
                }
                fused.push(cf.proj.forward(&cat)?);
                concat_in.push(cat);
            }
            Ok((
                fused,
                FusionCache::Concat {
                    token_mean,
                    summary,
                    concat_in,
                },
            ))
        }
        (None, None) => Ok((levels.to_vec(), FusionCache::None)),
    }
}

/// Backward of [`apply_fusion`]. Returns (d_levels, d_tokens).
pub fn fusion_backward(
    w: &VpWeights,
    levels: &[Tensor],
    tokens: Option<&Tensor>,
    cache: &FusionCache,
    d_fused: &[Tensor],
    grads: &mut VpGrads,
) -> Result<(Vec<Tensor>, Option<Tensor>)> {
    match cache {
        FusionCache::None => Ok((d_fused.to_vec(), None)),
        FusionCache::CrossAttn { rows, caches, .. } => {
            let block = w.fusion.as_ref().expect("mode checked");
            let z = tokens.expect("mode checked");
            let fgrads = grads.fusion.as_mut().expect("grads match weights");
            let mut d_levels = Vec::with_capacity(levels.len());
            let mut d_tokens = Tensor::zeros(z.shape());
            for (i, level) in levels.iter().enumerate() {
                let (d, h, wd) = (level.shape()[0], level.shape()[1], level.shape()[2]);
                let d_rows_fused = level_to_rows(&d_fused[i]);
                let (d_rows, dz) =
                    fuse_level_vjp(&rows[i], z, block, &caches[i], &d_rows_fused, fgrads)?;
                d_levels.push(rows_to_level(&d_rows, d, h, wd));
                ops::axpy(&mut d_tokens, 1.0, &dz)?;
            }
            Ok((d_levels, Some(d_tokens)))
        }
        FusionCache::Concat {
            token_mean,
            concat_in,
            ..
        } => {
            let cf = w.concat.as_ref().expect("mode checked");
            let z = tokens.expect("mode checked");
            let cgrads = grads.concat.as_mut().expect("grads match weights");
            let d = w.dims.fpn_dim;
            let mut d_levels = Vec::with_capacity(levels.len());
            let mut d_summary = Tensor::zeros(&[1, CONCAT_C]);
            for (i, dl) in d_fused.iter().enumerate() {
                let d_cat = cf.proj.vjp(&concat_in[i], dl, &mut cgrads.proj)?;
                let (_, h, wd) = (
                    d_cat.shape()[0],
                    d_cat.shape()[1],
                    d_cat.shape()[2],
                );
                let mut d_level = Tensor::zeros(&[d, h, wd]);
                d_level
                    .data_mut()
                    .copy_from_slice(&d_cat.data()[..d * h * wd]);
                for c in 0..CONCAT_C {
                    let mut acc = 0.0f32;
                    for px in 0..h * wd {
                        acc += d_cat.data()[(d + c) * h * wd + px];
                    }
                    d_summary.data_mut()[c] += acc;
                }
                d_levels.push(d_level);
            }
            let d_mean = cf.summary.vjp(token_mean, &d_summary, &mut cgrads.summary)?;
            let d_tokens = ops::mean_rows_vjp(z.shape(), &d_mean.reshaped(&[z.cols_2d()])?);
            Ok((d_levels, Some(d_tokens)))
        }
    }
}

// ---------------------------------------------------------------------------
// proposal head
// ---------------------------------------------------------------------------

/// One square anchor per cell, side 4×stride, centered on the cell.
pub fn level_anchors(dims: &VpDims, level: usize) -> Vec<BoxXyxy> {
    let stride = STRIDES[level];
    let side = (4 * stride) as f32;
    let n = dims.level_side(level);
    let mut anchors = Vec::with_capacity(n * n);
    for gy in 0..n {
        for gx in 0..n {
            let cx = (gx as f32 + 0.5) * stride as f32;
            let cy = (gy as f32 + 0.5) * stride as f32;
            anchors.push([
                cx - 0.5 * side,
                cy - 0.5 * side,
                cx + 0.5 * side,
                cy + 0.5 * side,
            ]);
        }
    }
    anchors
}

pub struct RpnOutput {
    /// per level [6, H, W]: channels 0..2 objectness logits, 2..6 deltas
    pub raw: Vec<Tensor>,
}

pub fn rpn_forward(w: &VpWeights, levels: &[Tensor]) -> Result<RpnOutput> {
    let raw = levels
        .iter()
        .map(|l| w.rpn.forward(l))
        .collect::<Result<Vec<_>>>()?;
    Ok(RpnOutput { raw })
}

/// Flattened per-anchor view of the RPN output: (objectness logits [N,2],
/// deltas [N,4]) for one level.
pub fn rpn_level_view(raw: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let n = h * w;
    let mut logits = Tensor::zeros(&[n, 2]);
    let mut deltas = Tensor::zeros(&[n, 4]);
    for i in 0..n {
        for c in 0..2 {
            logits.data_mut()[i * 2 + c] = raw.data()[c * n + i];
        }
        for c in 0..4 {
            deltas.data_mut()[i * 4 + c] = raw.data()[(2 + c) * n + i];
        }
    }
    (logits, deltas)
}

/// Scatter per-anchor gradients back into the [6,H,W] layout.
pub fn rpn_level_view_vjp(d_logits: &Tensor, d_deltas: &Tensor, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut d_raw = Tensor::zeros(&[6, h, w]);
    for i in 0..n {
        for c in 0..2 {
            d_raw.data_mut()[c * n + i] = d_logits.data()[i * 2 + c];
        }
        for c in 0..4 {
            d_raw.data_mut()[(2 + c) * n + i] = d_deltas.data()[i * 4 + c];
        }
    }
    d_raw
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub box_xyxy: BoxXyxy,
    pub objectness: f32,
    pub level: usize,
}

/// Decode and rank proposals from raw RPN maps: top-k_pre by objectness,
/// greedy NMS, keep k_post.
pub fn rpn_propose(
    dims: &VpDims,
    rpn: &RpnOutput,
    k_pre: usize,
    k_post: usize,
    nms_iou: f32,
) -> Result<Vec<Proposal>> {
    if k_post > k_pre {
        return Err(Error::domain("rpn_propose", "k_post must be <= k_pre"));
    }
    let img = dims.image_size as f32;
    let mut all: Vec<Proposal> = Vec::new();
    for (level, raw) in rpn.raw.iter().enumerate() {
        let anchors = level_anchors(dims, level);
        let (logits, deltas) = rpn_level_view(raw);
        let probs = ops::softmax_rows(&logits, 1.0)?;
        for (i, anchor) in anchors.iter().enumerate() {
            let score = probs.data()[i * 2 + 1];
            let d = [
                deltas.data()[i * 4],
                deltas.data()[i * 4 + 1],
                deltas.data()[i * 4 + 2],
                deltas.data()[i * 4 + 3],
            ];
            let bx = super::boxes::decode_box(anchor, &d, img);
            if bx[2] - bx[0] >= 1.0 && bx[3] - bx[1] >= 1.0 {
                all.push(Proposal {
                    box_xyxy: bx,
                    objectness: score,
                    level,
                });
            }
        }
    }
    all.sort_by(|a, b| {
        b.objectness
            .partial_cmp(&a.objectness)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    all.truncate(k_pre);
    let boxes: Vec<BoxXyxy> = all.iter().map(|p| p.box_xyxy).collect();
    let scores: Vec<f32> = all.iter().map(|p| p.objectness).collect();
    let kept = super::boxes::nms(&boxes, &scores, nms_iou);
    Ok(kept
        .into_iter()
        .take(k_post)
        .map(|i| all[i].clone())
        .collect())
}

/// Level for RoI pooling a box, by characteristic size.
pub fn assign_level(bx: &BoxXyxy) -> usize {
    let s = super::boxes::box_area(bx).sqrt();
    if s < 24.0 {
        0
    } else if s < 48.0 {
        1
    } else {
        2
    }
}

// ---------------------------------------------------------------------------
// RoI heads
// ---------------------------------------------------------------------------

pub struct BoxHeadCache {
    roi: Tensor,
    red_pre: Tensor,
    flat: Tensor,
    fc_pre: Tensor,
    fc: Tensor,
}

/// Classification logits [C+1] and box deltas [4] from one pooled RoI.
pub fn box_head_forward(w: &VpWeights, roi: &Tensor) -> Result<(Tensor, Tensor, BoxHeadCache)> {
    let p = w.dims.roi_size;
    let red_pre = w.box_reduce.forward(roi)?;
    let red = ops::relu(&red_pre);
    let flat = red.reshaped(&[1, HEAD_C * p * p])?;
    let fc_pre = w.box_fc.forward(&flat)?;
    let fc = ops::relu(&fc_pre);
    let cls = w.cls_out.forward(&fc)?.reshaped(&[w.dims.categories + 1])?;
    let deltas = w.box_out.forward(&fc)?.reshaped(&[4])?;
    Ok((
        cls,
        deltas,
        BoxHeadCache {
            roi: roi.clone(),
            red_pre,
            flat,
            fc_pre,
            fc,
        },
    ))
}

/// Backward of the box head; returns d_roi.
pub fn box_head_backward(
    w: &VpWeights,
    cache: &BoxHeadCache,
    d_cls: &Tensor,
    d_deltas: &Tensor,
    grads: &mut VpGrads,
) -> Result<Tensor> {
    let p = w.dims.roi_size;
    let c1 = w.dims.categories + 1;
    let d_cls2 = d_cls.clone().reshaped(&[1, c1])?;
    let d_del2 = d_deltas.clone().reshaped(&[1, 4])?;
    let mut d_fc = w.cls_out.vjp(&cache.fc, &d_cls2, &mut grads.cls_out)?;
    ops::axpy(&mut d_fc, 1.0, &w.box_out.vjp(&cache.fc, &d_del2, &mut grads.box_out)?)?;
    let d_fc_pre = ops::relu_vjp(&cache.fc_pre, &d_fc)?;
    let d_flat = w.box_fc.vjp(&cache.flat, &d_fc_pre, &mut grads.box_fc)?;
    let d_red = d_flat.reshaped(&[HEAD_C, p, p])?;
    let d_red_pre = ops::relu_vjp(&cache.red_pre, &d_red)?;
    w.box_reduce.vjp(&cache.roi, &d_red_pre, &mut grads.box_reduce)
}

pub struct MaskHeadCache {
    roi: Tensor,
    red_pre: Tensor,
    c1_pre: Tensor,
    up_in: Tensor,
    up: Tensor,
    c2_pre: Tensor,
    c2: Tensor,
}

/// Mask logits [C, m, m] from one pooled RoI (m = 2·p).
pub fn mask_head_forward(w: &VpWeights, roi: &Tensor) -> Result<(Tensor, MaskHeadCache)> {
    let red_pre = w.mask_reduce.forward(roi)?;
    let red = ops::relu(&red_pre);
    let c1_pre = w.mask_conv1.forward(&red)?;
    let up_in = ops::relu(&c1_pre);
    let up = ops::upsample_nearest2x(&up_in)?;
    let c2_pre = w.mask_conv2.forward(&up)?;
    let c2 = ops::relu(&c2_pre);
    let logits = w.mask_out.forward(&c2)?;
    Ok((
        logits,
        MaskHeadCache {
            roi: roi.clone(),
            red_pre,
            c1_pre,
            up_in,
            up,
            c2_pre,
            c2,
        },
    ))
}

pub fn mask_head_backward(
    w: &VpWeights,
    cache: &MaskHeadCache,
    d_logits: &Tensor,
    grads: &mut VpGrads,
) -> Result<Tensor> {
    let d_c2 = w.mask_out.vjp(&cache.c2, d_logits, &mut grads.mask_out)?;
    let d_c2_pre = ops::relu_vjp(&cache.c2_pre, &d_c2)?;
    let d_up = w.mask_conv2.vjp(&cache.up, &d_c2_pre, &mut grads.mask_conv2)?;
    let d_up_in = ops::upsample_nearest2x_vjp(cache.up_in.shape(), &d_up)?;
    let d_c1_pre = ops::relu_vjp(&cache.c1_pre, &d_up_in)?;
    let d_red = w.mask_conv1.vjp(&ops::relu(&cache.red_pre), &d_c1_pre, &mut grads.mask_conv1)?;
    let d_red_pre = ops::relu_vjp(&cache.red_pre, &d_red)?;
    w.mask_reduce.vjp(&cache.roi, &d_red_pre, &mut grads.mask_reduce)
}

/// The spec-level head view: one RoI in, (class logits, deltas, mask logits)
/// out.
pub fn heads_forward(w: &VpWeights, roi: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (cls, deltas, _) = box_head_forward(w, roi)?;
    let (mask, _) = mask_head_forward(w, roi)?;
    Ok((cls, deltas, mask))
}
