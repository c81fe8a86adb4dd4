//! Shared helpers for the integration tests: the independent brute-force
//! reference evaluator, dataset→ground-truth conversion, and a small SVD.
#![allow(dead_code)]

use std::collections::BTreeSet;

use pact_core::config::{FusionMode, RunConfig};
use pact_core::data::Dataset;
use pact_core::metrics::{coco_summary, Detection, GroundTruth, Task};
use pact_core::perceptron::{infer, VpModel};
use pact_core::tensor::Tensor;

pub fn gts_of(ds: &Dataset) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for i in 0..ds.len() {
        for ann in ds.annotations(i) {
            let mask_map = ds.mask(ann.mask_index);
            let mask = pact_core::metrics::BinaryMask::from_tensor(&mask_map, 0.5);
            out.push(GroundTruth {
                image_id: i,
                category_id: ann.category_id,
                box_xyxy: ann.box_xyxy,
                area: mask.area(),
                mask: Some(mask),
            });
        }
    }
    out
}

/// Run inference over a whole split and summarize both tasks.
pub fn eval_split(
    model: &VpModel,
    val: &Dataset,
    cfg: &RunConfig,
) -> (pact_core::metrics::EvalReport, pact_core::metrics::EvalReport) {
    let mut dets: Vec<Detection> = Vec::new();
    for i in 0..val.len() {
        let voxel = if model.mode == FusionMode::None {
            None
        } else {
            Some(val.voxel(i))
        };
        let ds = infer(model, i, &val.image(i), voxel.as_ref(), &cfg.vp, &cfg.eval).unwrap();
        dets.extend(ds.to_metric_detections(cfg.dims.image_size));
    }
    let gts = gts_of(val);
    let det = coco_summary(&dets, &gts, Task::Det, &cfg.eval).unwrap();
    let seg = coco_summary(&dets, &gts, Task::Seg, &cfg.eval).unwrap();
    (det, seg)
}

/// Singular values of a small dense matrix by one-sided Jacobi rotations.
/// Test-side oracle, independent of the library.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // columns of a as f64
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.data()[i * n + j] as f64).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * b).sum() };
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let app = dot(&cols[p], &cols[p]);
                let aqq = dot(&cols[q], &cols[q]);
                let apq = dot(&cols[p], &cols[q]);
                off += apq.abs();
                if apq.abs() < 1e-18 {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let vp = cols[p][i];
                    let vq = cols[q][i];
                    cols[p][i] = c * vp - s * vq;
                    cols[q][i] = s * vp + c * vq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

// ---------------------------------------------------------------------------
// brute-force COCO-protocol reference evaluator
// ---------------------------------------------------------------------------

pub mod reference_eval {
    use super::*;

    fn iou(a: &[f32; 4], b: &[f32; 4]) -> f64 {
        let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
        let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
        let inter = w * h;
        let sa = ((a[2] - a[0]) as f64) * ((a[3] - a[1]) as f64);
        let sb = ((b[2] - b[0]) as f64) * ((b[3] - b[1]) as f64);
        if sa + sb - inter <= 0.0 {
            return 0.0;
        }
        inter / (sa + sb - inter)
    }

    fn flags_one_image(
        dets: &[&Detection],
        gts: &[&GroundTruth],
        thresh: f64,
        lo: f64,
        hi: f64,
    ) -> Vec<(f32, Option<bool>)> {
        let ignored: Vec<bool> = gts.iter().map(|g| g.area < lo || g.area > hi).collect();
        let mut taken = vec![false; gts.len()];
        let mut out = Vec::new();
        for d in dets {
            let mut best: Option<usize> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || ignored[gi] {
                    continue;
                }
                let v = iou(&d.box_xyxy, &g.box_xyxy);
                if v >= thresh {
                    let better = match best {
                        None => true,
                        Some(b) => v > iou(&d.box_xyxy, &gts[b].box_xyxy),
                    };
                    if better {
                        best = Some(gi);
                    }
                }
            }
            if let Some(gi) = best {
                taken[gi] = true;
                out.push((d.score, Some(true)));
                continue;
            }
            let mut absorbed = false;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || !ignored[gi] {
                    continue;
                }
                if iou(&d.box_xyxy, &g.box_xyxy) >= thresh {
                    taken[gi] = true;
                    absorbed = true;
                    break;
                }
            }
            if absorbed {
                out.push((d.score, None));
            } else {
                let area =
                    ((d.box_xyxy[2] - d.box_xyxy[0]) * (d.box_xyxy[3] - d.box_xyxy[1])) as f64;
                if area < lo || area > hi {
                    out.push((d.score, None));
                } else {
                    out.push((d.score, Some(false)));
                }
            }
        }
        out
    }

    fn ranked(
        dets: &[Detection],
        gts: &[GroundTruth],
        cat: usize,
        thresh: f64,
        lo: f64,
        hi: f64,
        topk: usize,
    ) -> (Vec<bool>, usize) {
        let images: BTreeSet<usize> = gts
            .iter()
            .map(|g| g.image_id)
            .chain(dets.iter().map(|d| d.image_id))
            .collect();
        let mut scored: Vec<(f32, usize, usize, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for (img_pos, img) in images.iter().enumerate() {
            let mut img_dets: Vec<&Detection> =
                dets.iter().filter(|d| d.image_id == *img).collect();
            img_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            img_dets.truncate(topk);
            let cat_dets: Vec<&Detection> = img_dets
                .into_iter()
                .filter(|d| d.category_id == cat)
                .collect();
            let mut cat_gts: Vec<&GroundTruth> = gts
                .iter()
                .filter(|g| g.image_id == *img && g.category_id == cat)
                .collect();
            cat_gts.sort_by_key(|g| (g.area < lo || g.area > hi) as u8);
            n_gt += cat_gts
                .iter()
                .filter(|g| g.area >= lo && g.area <= hi)
                .count();
            for (rank, (score, flag)) in flags_one_image(&cat_dets, &cat_gts, thresh, lo, hi)
                .into_iter()
                .enumerate()
            {
                if let Some(tp) = flag {
                    scored.push((score, img_pos, rank, tp));
                }
            }
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        (scored.into_iter().map(|s| s.3).collect(), n_gt)
    }

    fn ap_101(flags: &[bool], n_gt: usize) -> Option<f64> {
        if n_gt == 0 {
            return None;
        }
        let mut prec = Vec::new();
        let mut rec = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for &f in flags {
            if f {
                tp += 1
            } else {
                fp += 1
            }
            prec.push(tp as f64 / (tp + fp) as f64);
            rec.push(tp as f64 / n_gt as f64);
        }
        let mut acc = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let mut best = 0.0f64;
            for i in 0..prec.len() {
                if rec[i] >= r - 1e-12 {
                    for &p in &prec[i..] {
                        if p > best {
                            best = p;
                        }
                    }
                    break;
                }
            }
            acc += best;
        }
        Some(acc / 101.0)
    }

    pub const THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

    fn cats_of(gts: &[GroundTruth]) -> Vec<usize> {
        let s: BTreeSet<usize> = gts.iter().map(|g| g.category_id).collect();
        s.into_iter().collect()
    }

    pub fn ap(
        dets: &[Detection],
        gts: &[GroundTruth],
        thresholds: &[f64],
        lo: f64,
        hi: f64,
        topk: usize,
    ) -> f64 {
        let mut vals = Vec::new();
        for cat in cats_of(gts) {
            for &t in thresholds {
                let (flags, n_gt) = ranked(dets, gts, cat, t, lo, hi, topk);
                if let Some(v) = ap_101(&flags, n_gt) {
                    vals.push(v);
                }
            }
        }
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn ar(dets: &[Detection], gts: &[GroundTruth], lo: f64, hi: f64, topk: usize) -> f64 {
        let mut vals = Vec::new();
        for cat in cats_of(gts) {
            for &t in THRESHOLDS.iter() {
                let (flags, n_gt) = ranked(dets, gts, cat, t, lo, hi, topk);
                if n_gt == 0 {
                    continue;
                }
                let tp = flags.iter().filter(|&&f| f).count();
                vals.push(tp as f64 / n_gt as f64);
            }
        }
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn percat(
        dets: &[Detection],
        gts: &[GroundTruth],
        iou_t: f64,
        topk: usize,
    ) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for cat in cats_of(gts) {
            let (flags, n_gt) = ranked(dets, gts, cat, iou_t, 0.0, f64::INFINITY, topk);
            if let Some(v) = ap_101(&flags, n_gt) {
                out.push((cat, v));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// randomized oracle comparison (shared by metrics_oracle and acceptance)
// ---------------------------------------------------------------------------

pub fn random_eval_instance(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    use rand::Rng;
    let mut rng = pact_core::rng::rng_from(0x6f72_6163, seed);
    let n_images = rng.random_range(1..=5);
    let n_cats = rng.random_range(1..=4usize);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 0..n_images {
        let n_gt = rng.random_range(0..=4);
        for _ in 0..n_gt {
            let x1: f32 = rng.random_range(0.0..50.0);
            let y1: f32 = rng.random_range(0.0..50.0);
            let w: f32 = rng.random_range(3.0..30.0);
            let h: f32 = rng.random_range(3.0..30.0);
            let b = [x1, y1, x1 + w, y1 + h];
            let cat = rng.random_range(0..n_cats);
            gts.push(GroundTruth {
                image_id: img,
                category_id: cat,
                box_xyxy: b,
                mask: None,
                area: (w * h) as f64,
            });
            let copies = rng.random_range(0..=2);
            for _ in 0..copies {
                let bx = [
                    b[0] + rng.random_range(-4.0f32..4.0),
                    b[1] + rng.random_range(-4.0f32..4.0),
                    b[2] + rng.random_range(-4.0f32..4.0),
                    b[3] + rng.random_range(-4.0f32..4.0),
                ];
                if bx[2] <= bx[0] || bx[3] <= bx[1] {
                    continue;
                }
                dets.push(Detection {
                    image_id: img,
                    category_id: if rng.random_range(0.0..1.0) < 0.8 {
                        cat
                    } else {
                        rng.random_range(0..n_cats)
                    },
                    score: rng.random_range(0.05..1.0),
                    box_xyxy: bx,
                    mask: None,
                });
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            let x1: f32 = rng.random_range(0.0..60.0);
            let y1: f32 = rng.random_range(0.0..60.0);
            dets.push(Detection {
                image_id: img,
                category_id: rng.random_range(0..n_cats),
                score: rng.random_range(0.05..1.0),
                box_xyxy: [
                    x1,
                    y1,
                    x1 + rng.random_range(2.0..20.0),
                    y1 + rng.random_range(2.0..20.0),
                ],
                mask: None,
            });
        }
    }
    if gts.is_empty() {
        gts.push(GroundTruth {
            image_id: 0,
            category_id: 0,
            box_xyxy: [1.0, 1.0, 9.0, 9.0],
            mask: None,
            area: 64.0,
        });
    }
    let cats: BTreeSet<usize> = gts.iter().map(|g| g.category_id).collect();
    dets.retain(|d| cats.contains(&d.category_id));
    (dets, gts)
}

/// Compare every summary field against the brute-force reference on random
/// instances. Panics on the first mismatch; returns the worst deviation.
pub fn oracle_check(seeds: std::ops::Range<u64>) -> f64 {
    use pact_core::config::EvalConfig;
    use pact_core::metrics::per_category_map;
    let cfg = EvalConfig {
        score_thresh: 0.0,
        nms_iou: 0.5,
        max_detections: 100,
        area_small: 144.0,
        area_large: 576.0,
    };
    let mut worst = 0.0f64;
    for seed in seeds {
        let (dets, gts) = random_eval_instance(seed);
        let report = coco_summary(&dets, &gts, Task::Det, &cfg).unwrap();
        let all = (0.0, f64::INFINITY);
        let small = (0.0, cfg.area_small);
        let medium = (cfg.area_small, cfg.area_large);
        let large = (cfg.area_large, f64::INFINITY);
        let r = &reference_eval::THRESHOLDS;
        let cases = [
            ("AP", report.ap, reference_eval::ap(&dets, &gts, r, all.0, all.1, 100)),
            ("AP50", report.ap50, reference_eval::ap(&dets, &gts, &[0.5], all.0, all.1, 100)),
            ("AP75", report.ap75, reference_eval::ap(&dets, &gts, &[0.75], all.0, all.1, 100)),
            ("AP_S", report.ap_s, reference_eval::ap(&dets, &gts, r, small.0, small.1, 100)),
            ("AP_M", report.ap_m, reference_eval::ap(&dets, &gts, r, medium.0, medium.1, 100)),
            ("AP_L", report.ap_l, reference_eval::ap(&dets, &gts, r, large.0, large.1, 100)),
            ("AR_1", report.ar_1, reference_eval::ar(&dets, &gts, all.0, all.1, 1)),
            ("AR_10", report.ar_10, reference_eval::ar(&dets, &gts, all.0, all.1, 10)),
            ("AR_100", report.ar_100, reference_eval::ar(&dets, &gts, all.0, all.1, 100)),
            ("AR_S", report.ar_s, reference_eval::ar(&dets, &gts, small.0, small.1, 100)),
            ("AR_M", report.ar_m, reference_eval::ar(&dets, &gts, medium.0, medium.1, 100)),
            ("AR_L", report.ar_l, reference_eval::ar(&dets, &gts, large.0, large.1, 100)),
        ];
        for (name, got, want) in cases {
            let dev = (got - want).abs();
            worst = worst.max(dev);
            assert!(
                dev < 1e-12,
                "seed {seed}: {name} evaluator {got} vs oracle {want}"
            );
        }
        let table = per_category_map(&dets, &gts, Task::Det, 0.5, 100).unwrap();
        let oracle_table = reference_eval::percat(&dets, &gts, 0.5, 100);
        assert_eq!(table.len(), oracle_table.len(), "seed {seed}");
        for (cat, want) in oracle_table {
            let got = table[&cat];
            let dev = (got - want).abs();
            worst = worst.max(dev);
            assert!(dev < 1e-12, "seed {seed} cat {cat}: {got} vs {want}");
        }
    }
    worst
}
