//! COCO-protocol evaluation: IoU, greedy score-ordered matching, 101-point
//! average precision over IoU thresholds 0.50:0.05:0.95, size-stratified
//! AP/AR and top-k average recall.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Det,
    Seg,
}

#[derive(Debug, Clone)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn from_tensor(t: &Tensor, threshold: f32) -> Self {
        let (h, w) = (t.shape()[0], t.shape()[1]);
        BinaryMask {
            h,
            w,
            data: t.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn area(&self) -> f64 {
        self.data.iter().filter(|&&b| b).count() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: usize,
    pub category_id: usize,
    pub score: f32,
    pub box_xyxy: [f32; 4],
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image_id: usize,
    pub category_id: usize,
    pub box_xyxy: [f32; 4],
    pub mask: Option<BinaryMask>,
    /// Object area in pixels (mask pixel count), used for size buckets.
    pub area: f64,
}

/// Intersection-over-union of two continuous-coordinate boxes.
pub fn iou_box(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
    let inter = ix * iy;
    let area_a = ((a[2] - a[0]) * (a[3] - a[1])).max(0.0) as f64;
    let area_b = ((b[2] - b[0]) * (b[3] - b[1])).max(0.0) as f64;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection-over-union of two same-shape binary masks.
pub fn iou_mask(a: &BinaryMask, b: &BinaryMask) -> f64 {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn pair_iou(task: Task, det: &Detection, gt: &GroundTruth) -> f64 {
    match task {
        Task::Det => iou_box(&det.box_xyxy, &gt.box_xyxy),
        Task::Seg => match (&det.mask, &gt.mask) {
            (Some(dm), Some(gm)) => iou_mask(dm, gm),
            _ => 0.0,
        },
    }
}

fn det_area(task: Task, det: &Detection) -> f64 {
    match task {
        Task::Det => ((det.box_xyxy[2] - det.box_xyxy[0]) * (det.box_xyxy[3] - det.box_xyxy[1]))
            .max(0.0) as f64,
        Task::Seg => det.mask.as_ref().map(|m| m.area()).unwrap_or(0.0),
    }
}

/// Outcome of one ranked detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
}

/// Greedy matching of score-sorted detections against ground truths of one
/// image and category. Each detection takes the unmatched GT with the
/// highest IoU ≥ `iou_thresh`; each GT matches at most once. Returns one
/// flag per detection: Some(Tp/Fp) or None when the detection is ignored
/// (matched to an out-of-bucket GT, or unmatched with out-of-bucket area).
pub fn match_detections(
    ious: &[Vec<f64>],
    gt_ignore: &[bool],
    det_areas: &[f64],
    iou_thresh: f64,
    area_range: (f64, f64),
) -> Vec<Option<MatchFlag>> {
    let n_gt = gt_ignore.len();
    let mut gt_matched = vec![false; n_gt];
    let mut flags = Vec::with_capacity(ious.len());
    for (d, row) in ious.iter().enumerate() {
        // pass 1: real GTs, best IoU wins
        let mut best: Option<(usize, f64)> = None;
        for g in 0..n_gt {
            if gt_matched[g] || gt_ignore[g] {
                continue;
            }
            let iou = row[g];
            if iou >= iou_thresh && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            flags.push(Some(MatchFlag::Tp));
            continue;
        }
        // pass 2: ignored GTs absorb the detection without penalty
        let mut ignored_hit = false;
        for g in 0..n_gt {
            if gt_matched[g] || !gt_ignore[g] {
                continue;
            }
            if row[g] >= iou_thresh {
                gt_matched[g] = true;
                ignored_hit = true;
                break;
            }
        }
        if ignored_hit {
            flags.push(None);
        } else if det_areas[d] < area_range.0 || det_areas[d] > area_range.1 {
            flags.push(None);
        } else {
            flags.push(Some(MatchFlag::Fp));
        }
    }
    flags
}

/// 101-point interpolated average precision from ranked match flags.
/// Returns None when there is no ground truth (category excluded upstream).
pub fn average_precision(flags: &[MatchFlag], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &f in flags {
        match f {
            MatchFlag::Tp => tp += 1,
            MatchFlag::Fp => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut acc = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // first index with recall >= r
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map(|i| precisions[i])
            .unwrap_or(0.0);
        acc += p;
    }
    Some(acc / 101.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar_1: f64,
    pub ar_10: f64,
    pub ar_100: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
    /// AP at IoU 0.5 per category id (categories with ground truth only).
    pub per_category_ap50: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// Table-presentation JSON: metrics ×100 rounded to one decimal.
    pub fn to_table_json(&self) -> serde_json::Value {
        let r = |v: f64| (v * 1000.0).round() / 10.0;
        serde_json::json!({
            "task": self.task,
            "AP": r(self.ap),
            "AP50": r(self.ap50),
            "AP75": r(self.ap75),
            "AP_S": r(self.ap_s),
            "AP_M": r(self.ap_m),
            "AP_L": r(self.ap_l),
            "AR_1": r(self.ar_1),
            "AR_10": r(self.ar_10),
            "AR_100": r(self.ar_100),
            "AR_S": r(self.ar_s),
            "AR_M": r(self.ar_m),
            "AR_L": r(self.ar_l),
            "per_category_AP50": self
                .per_category_ap50
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::json!(r(*v))))
                .collect::<serde_json::Map<String, serde_json::Value>>(),
        })
    }
}

/// All detections of one image sorted by descending score (ties broken by
/// insertion order), truncated to `top_k` across categories.
fn image_detections_topk<'a>(dets: &[&'a Detection], top_k: usize) -> Vec<&'a Detection> {
    let mut sorted: Vec<&Detection> = dets.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    sorted.truncate(top_k);
    sorted
}

struct Grouped<'a> {
    image_ids: Vec<usize>,
    dets_by_image: BTreeMap<usize, Vec<&'a Detection>>,
    gts_by_image: BTreeMap<usize, Vec<&'a GroundTruth>>,
    categories: Vec<usize>,
}

fn group<'a>(dets: &'a [Detection], gts: &'a [GroundTruth]) -> Result<Grouped<'a>> {
    let mut dets_by_image: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
    let mut gts_by_image: BTreeMap<usize, Vec<&GroundTruth>> = BTreeMap::new();
    let mut cats: BTreeSet<usize> = BTreeSet::new();
    let mut images: BTreeSet<usize> = BTreeSet::new();
    for gt in gts {
        cats.insert(gt.category_id);
        images.insert(gt.image_id);
        gts_by_image.entry(gt.image_id).or_default().push(gt);
    }
    for det in dets {
        if !cats.contains(&det.category_id) {
            // category never appears in ground truth: either an unknown id or
            // an excluded category
            let known = gts.iter().any(|g| g.category_id == det.category_id);
            if !known {
                return Err(Error::domain(
                    "coco_summary",
                    format!("detection references unknown category {}", det.category_id),
                ));
            }
        }
        images.insert(det.image_id);
        dets_by_image.entry(det.image_id).or_default().push(det);
    }
    Ok(Grouped {
        image_ids: images.into_iter().collect(),
        dets_by_image,
        gts_by_image,
        categories: cats.into_iter().collect(),
    })
}

/// Per (category, threshold, area range, top-k): ranked flags + counted GTs.
#[allow(clippy::too_many_arguments)]
fn evaluate_category(
    task: Task,
    grouped: &Grouped<'_>,
    category: usize,
    iou_thresh: f64,
    area_range: (f64, f64),
    top_k: usize,
) -> (Vec<MatchFlag>, usize) {
    // (score, image order, flag) for global ranking
    let mut ranked: Vec<(f32, usize, usize, MatchFlag)> = Vec::new();
    let mut n_gt = 0usize;
    for (img_pos, &img) in grouped.image_ids.iter().enumerate() {
        let empty_d = Vec::new();
        let empty_g = Vec::new();
        let all_dets = grouped.dets_by_image.get(&img).unwrap_or(&empty_d);
        let gts_all = grouped.gts_by_image.get(&img).unwrap_or(&empty_g);
        let top = image_detections_topk(all_dets, top_k);
        let dets: Vec<&Detection> = top
            .into_iter()
            .filter(|d| d.category_id == category)
            .collect();
        // sort GTs: in-bucket first so matching prefers them
        let mut gts: Vec<&GroundTruth> = gts_all
            .iter()
            .copied()
            .filter(|g| g.category_id == category)
            .collect();
        gts.sort_by_key(|g| (g.area < area_range.0 || g.area > area_range.1) as u8);
        let gt_ignore: Vec<bool> = gts
            .iter()
            .map(|g| g.area < area_range.0 || g.area > area_range.1)
            .collect();
        n_gt += gt_ignore.iter().filter(|&&ig| !ig).count();

        let ious: Vec<Vec<f64>> = dets
            .iter()
            .map(|d| gts.iter().map(|g| pair_iou(task, d, g)).collect())
            .collect();
        let det_areas: Vec<f64> = dets.iter().map(|d| det_area(task, d)).collect();
        let flags = match_detections(&ious, &gt_ignore, &det_areas, iou_thresh, area_range);
        for (i, flag) in flags.into_iter().enumerate() {
            if let Some(f) = flag {
                ranked.push((dets[i].score, img_pos, i, f));
            }
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    (ranked.into_iter().map(|(_, _, _, f)| f).collect(), n_gt)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn ap_over(
    task: Task,
    grouped: &Grouped<'_>,
    thresholds: &[f64],
    area_range: (f64, f64),
    top_k: usize,
) -> f64 {
    let mut values = Vec::new();
    for &cat in &grouped.categories {
        for &t in thresholds {
            let (flags, n_gt) = evaluate_category(task, grouped, cat, t, area_range, top_k);
            if let Some(ap) = average_precision(&flags, n_gt) {
                values.push(ap);
            }
        }
    }
    mean(&values)
}

fn recall_over(
    task: Task,
    grouped: &Grouped<'_>,
    area_range: (f64, f64),
    top_k: usize,
) -> f64 {
    let mut values = Vec::new();
    for &cat in &grouped.categories {
        for &t in IOU_THRESHOLDS.iter() {
            let (flags, n_gt) = evaluate_category(task, grouped, cat, t, area_range, top_k);
            if n_gt == 0 {
                continue;
            }
            let tp = flags.iter().filter(|&&f| f == MatchFlag::Tp).count();
            values.push(tp as f64 / n_gt as f64);
        }
    }
    mean(&values)
}

const ALL_AREAS: (f64, f64) = (0.0, f64::INFINITY);

/// Full COCO-style summary for one task.
pub fn coco_summary(
    dets: &[Detection],
    gts: &[GroundTruth],
    task: Task,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let grouped = group(dets, gts)?;
    let small = (0.0, cfg.area_small);
    let medium = (cfg.area_small, cfg.area_large);
    let large = (cfg.area_large, f64::INFINITY);
    let k = cfg.max_detections;

    let report = EvalReport {
        task,
        ap: ap_over(task, &grouped, &IOU_THRESHOLDS, ALL_AREAS, k),
        ap50: ap_over(task, &grouped, &[0.5], ALL_AREAS, k),
        ap75: ap_over(task, &grouped, &[0.75], ALL_AREAS, k),
        ap_s: ap_over(task, &grouped, &IOU_THRESHOLDS, small, k),
        ap_m: ap_over(task, &grouped, &IOU_THRESHOLDS, medium, k),
        ap_l: ap_over(task, &grouped, &IOU_THRESHOLDS, large, k),
        ar_1: recall_over(task, &grouped, ALL_AREAS, 1),
        ar_10: recall_over(task, &grouped, ALL_AREAS, 10),
        ar_100: recall_over(task, &grouped, ALL_AREAS, k),
        ar_s: recall_over(task, &grouped, small, k),
        ar_m: recall_over(task, &grouped, medium, k),
        ar_l: recall_over(task, &grouped, large, k),
        per_category_ap50: per_category_map(dets, gts, task, 0.5, k)?,
    };
    debug_assert!(report.ap <= report.ap50 + 1e-12);
    Ok(report)
}

/// Category → AP at a single IoU threshold; categories absent from the
/// ground truth are omitted.
pub fn per_category_map(
    dets: &[Detection],
    gts: &[GroundTruth],
    task: Task,
    iou: f64,
    top_k: usize,
) -> Result<BTreeMap<usize, f64>> {
    let grouped = group(dets, gts)?;
    let mut out = BTreeMap::new();
    for &cat in &grouped.categories {
        let (flags, n_gt) = evaluate_category(task, &grouped, cat, iou, ALL_AREAS, top_k);
        if let Some(ap) = average_precision(&flags, n_gt) {
            out.insert(cat, ap);
        }
    }
    Ok(out)
}
