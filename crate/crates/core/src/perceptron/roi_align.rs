//! Bilinear RoI pooling to a fixed p×p grid, one sample per cell center,
//! with a backward pass into the feature map.

use crate::error::{Error, Result};
use crate::perceptron::boxes::BoxXyxy;
use crate::tensor::{Scalar, Tensor, TensorBase};

/// Bilinear read of one point from a [C,H,W] map, plus the (index, weight)
/// pairs needed for the backward scatter.
#[inline]
fn bilinear_taps(h: usize, w: usize, y: f32, x: f32) -> [(usize, usize, f32); 4] {
    // continuous coordinates: pixel (i,j) has its center at (j + 0.5, i + 0.5)
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let dy = fy - y0 as f32;
    let dx = fx - x0 as f32;
    [
        (y0, x0, (1.0 - dy) * (1.0 - dx)),
        (y0, x1, (1.0 - dy) * dx),
        (y1, x0, dy * (1.0 - dx)),
        (y1, x1, dy * dx),
    ]
}

/// Pool `feature` ([C,H,W], at `stride` relative to image pixels) over `bx`
/// (image coordinates) to [C,p,p].
pub fn roi_align<T: Scalar>(
    feature: &TensorBase<T>,
    bx: &BoxXyxy,
    stride: usize,
    p: usize,
) -> Result<TensorBase<T>> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "roi_align",
            expected: vec![3],
            got: s.to_vec(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let bw = (bx[2] - bx[0]) / stride as f32;
    let bh = (bx[3] - bx[1]) / stride as f32;
    let mut out = TensorBase::<T>::zeros(&[c, p, p]);
    if bw <= 0.0 || bh <= 0.0 {
        // degenerate box: zero output by contract
        return Ok(out);
    }
    let x0 = bx[0] / stride as f32;
    let y0 = bx[1] / stride as f32;
    for gy in 0..p {
        let sy = y0 + (gy as f32 + 0.5) * bh / p as f32;
        for gx in 0..p {
            let sx = x0 + (gx as f32 + 0.5) * bw / p as f32;
            let taps = bilinear_taps(h, w, sy, sx);
            for ch in 0..c {
                let mut acc = T::ZERO;
                for &(ty, tx, wt) in &taps {
                    acc += feature.data()[(ch * h + ty) * w + tx] * T::from_f32(wt);
                }
                out.data_mut()[(ch * p + gy) * p + gx] = acc;
            }
        }
    }
    Ok(out)
}

/// Scatter the pooled gradient back into the feature map (accumulating).
pub fn roi_align_vjp(
    feature_shape: &[usize],
    bx: &BoxXyxy,
    stride: usize,
    p: usize,
    d_out: &Tensor,
    d_feature: &mut Tensor,
) -> Result<()> {
    let (c, h, w) = (feature_shape[0], feature_shape[1], feature_shape[2]);
    let bw = (bx[2] - bx[0]) / stride as f32;
    let bh = (bx[3] - bx[1]) / stride as f32;
    if bw <= 0.0 || bh <= 0.0 {
        return Ok(());
    }
    let x0 = bx[0] / stride as f32;
    let y0 = bx[1] / stride as f32;
    for gy in 0..p {
        let sy = y0 + (gy as f32 + 0.5) * bh / p as f32;
        for gx in 0..p {
            let sx = x0 + (gx as f32 + 0.5) * bw / p as f32;
            let taps = bilinear_taps(h, w, sy, sx);
            for ch in 0..c {
                let g = d_out.data()[(ch * p + gy) * p + gx];
                for &(ty, tx, wt) in &taps {
                    d_feature.data_mut()[(ch * h + ty) * w + tx] += g * wt;
                }
            }
        }
    }
    Ok(())
}
