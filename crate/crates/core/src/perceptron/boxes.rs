//! Box algebra: center-size delta encoding, clipping, IoU and greedy NMS.

/// (x1, y1, x2, y2), all f32 pixels.
pub type BoxXyxy = [f32; 4];

pub const DELTA_CLAMP: f32 = 4.0;

pub fn box_area(b: &BoxXyxy) -> f32 {
    ((b[2] - b[0]) * (b[3] - b[1])).max(0.0)
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip(b: &BoxXyxy, size: f32) -> BoxXyxy {
    [
        b[0].clamp(0.0, size),
        b[1].clamp(0.0, size),
        b[2].clamp(0.0, size),
        b[3].clamp(0.0, size),
    ]
}

/// Deltas (tx, ty, tw, th) mapping `anchor` onto `target`.
pub fn encode_box(anchor: &BoxXyxy, target: &BoxXyxy) -> [f32; 4] {
    let aw = anchor[2] - anchor[0];
    let ah = anchor[3] - anchor[1];
    let acx = anchor[0] + 0.5 * aw;
    let acy = anchor[1] + 0.5 * ah;
    let tw = target[2] - target[0];
    let th = target[3] - target[1];
    let tcx = target[0] + 0.5 * tw;
    let tcy = target[1] + 0.5 * th;
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ]
}

/// Inverse of [`encode_box`]; exp arguments are clamped to ±DELTA_CLAMP and
/// the result is clipped to the image square.
pub fn decode_box(anchor: &BoxXyxy, deltas: &[f32; 4], image_size: f32) -> BoxXyxy {
    let aw = anchor[2] - anchor[0];
    let ah = anchor[3] - anchor[1];
    let acx = anchor[0] + 0.5 * aw;
    let acy = anchor[1] + 0.5 * ah;
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = ah * deltas[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    clip(
        &[cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h],
        image_size,
    )
}

/// Greedy NMS over (box, score) pairs. Ties in score are broken by the lower
/// index, so the result depends only on the inputs. Returns kept indices in
/// descending score order.
pub fn nms(boxes: &[BoxXyxy], scores: &[f32], iou_thresh: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &cand in &order {
        if kept.iter().all(|&k| iou(&boxes[cand], &boxes[k]) <= iou_thresh) {
            kept.push(cand);
        }
    }
    kept
}
