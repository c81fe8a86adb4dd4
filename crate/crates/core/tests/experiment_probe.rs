//! Ignored-by-default experiment probe: one full comparison run printing the
//! ordering metrics. Used to sanity-check generator difficulty settings.
//! cargo test -p pact-core --test experiment_probe -- --ignored --nocapture

use pact_core::config::{FusionMode, RunConfig};
use pact_core::data::{generate_synthetic_dataset, Dataset};
use pact_core::decoder::pretrain;
use pact_core::metrics::{coco_summary, Detection, GroundTruth, Task};
use pact_core::perceptron::{infer, train_vp, VpModel};

fn gts_of(ds: &Dataset) -> Vec<GroundTruth> {
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

fn eval_model(
    model: &VpModel,
    val: &Dataset,
    cfg: &RunConfig,
) -> (f64, f64, f64, f64) {
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
    (det.ap, det.ar_100, seg.ap, seg.ar_100)
}

#[test]
#[ignore]
fn probe_properties_three_seeds() {
    for seed in 0..3u64 {
        println!("===== seed {seed} =====");
        probe_properties_for_seed(seed);
    }
}

fn probe_properties_for_seed(seed: u64) {
    use pact_core::fusion::{attention_summary, feature_diff, LN_EPS};
    use pact_core::perceptron::probe_forward;
    use pact_core::tensor::ops;

    let cfg = RunConfig::desk_default();
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&cfg, seed, dir.path()).unwrap();
    let train = Dataset::load(&dir.path().join("train/manifest.json")).unwrap();
    let val = Dataset::load(&dir.path().join("val/manifest.json")).unwrap();
    let (dec, ridge, _) = pretrain(&train, &cfg, seed).unwrap();
    let (model, _) = train_vp(&train, Some((&dec, &ridge)), &cfg, seed).unwrap();
    let block = model.vp.fusion.as_ref().unwrap();

    let mut summaries: Vec<(usize, f64, Vec<Vec<f32>>)> = Vec::new();
    let (mut ins, mut ins_n, mut outs, mut outs_n) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..val.len() {
        let probe = probe_forward(&model, i, &val.image(i), &val.voxel(i)).unwrap();
        let summary = attention_summary(&probe.attention).unwrap();
        let mut areas = std::collections::BTreeMap::<usize, f64>::new();
        let mut total = 0.0f64;
        for ann in val.annotations(i) {
            let b = ann.box_xyxy;
            let a = ((b[2] - b[0]) * (b[3] - b[1])) as f64;
            *areas.entry(ann.category_id).or_default() += a;
            total += a;
        }
        let (&dom, &da) = areas.iter().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap();
        let mut all = summary.per_level.clone();
        all.push(summary.multi_layer.clone());
        summaries.push((dom, da / total, all));
        for (level, ((raw, h, w), (fused, _, _))) in
            probe.raw_rows.iter().zip(probe.fused_rows.iter()).enumerate()
        {
            let base = ops::layer_norm(raw, &block.gamma, &block.beta, LN_EPS).unwrap();
            let (_, abs_map) = feature_diff(&base, fused, *h, *w).unwrap();
            let stride = pact_core::perceptron::STRIDES[level] as f32;
            for gy in 0..*h {
                for gx in 0..*w {
                    let cx = (gx as f32 + 0.5) * stride;
                    let cy = (gy as f32 + 0.5) * stride;
                    let inside = val.annotations(i).iter().any(|ann| {
                        let b = ann.box_xyxy;
                        cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3]
                    });
                    let v = abs_map.data()[gy * *w + gx] as f64;
                    if inside { ins += v; ins_n += 1.0; } else { outs += v; outs_n += 1.0; }
                }
            }
        }
    }
    let cc = |a: &[f32], b: &[f32]| -> f64 {
        let ma: f64 = a.iter().map(|&x| x as f64).sum::<f64>() / a.len() as f64;
        let mb: f64 = b.iter().map(|&x| x as f64).sum::<f64>() / b.len() as f64;
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let (xa, yb) = (x as f64 - ma, y as f64 - mb);
            dot += xa * yb;
            na += xa * xa;
            nb += yb * yb;
        }
        dot / (na.sqrt() * nb.sqrt()).max(1e-12)
    };
    // two best-represented dominant classes, as in the paired-class protocol
    let sel: Vec<_> = summaries.iter().filter(|(_, f, _)| *f >= 0.5).collect();
    let mut by_cat = std::collections::BTreeMap::<usize, usize>::new();
    for s in &sel {
        *by_cat.entry(s.0).or_default() += 1;
    }
    let mut cats: Vec<(usize, usize)> = by_cat.into_iter().collect();
    cats.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    let (cat_a, cat_b) = (cats[0].0, cats[1].0);
    let group: Vec<_> = sel.iter().filter(|s| s.0 == cat_a || s.0 == cat_b).collect();
    // controlled-stimulus protocol: single-object scenes, two classes,
    // ten images each, probed with the trained model
    {
        let mut probe_cfg = cfg.clone();
        probe_cfg.generator.min_objects = 1;
        probe_cfg.generator.max_objects = 1;
        let pool = pact_core::data::generate_samples(&probe_cfg, seed, 0x70726f62, 120);
        let mut by_cat: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in pool.iter().enumerate() {
            by_cat.entry(s.instances[0].category_id).or_default().push(i);
        }
        let mut cats: Vec<(usize, Vec<usize>)> = by_cat.into_iter().collect();
        cats.sort_by_key(|(_, v)| std::cmp::Reverse(v.len()));
        let (ca, ids_a) = (&cats[0].0, &cats[0].1[..10.min(cats[0].1.len())]);
        let (cb, ids_b) = (&cats[1].0, &cats[1].1[..10.min(cats[1].1.len())]);
        let mut vecs: Vec<(usize, Vec<f32>)> = Vec::new();
        for (&cat, ids) in [(ca, ids_a), (cb, ids_b)] {
            for &i in ids {
                let probe = probe_forward(&model, i, &pool[i].image, &pool[i].voxel).unwrap();
                let summary = attention_summary(&probe.attention).unwrap();
                vecs.push((cat, summary.multi_layer));
            }
        }
        for centered in [false, true] {
            let m_tok = vecs[0].1.len();
            let mut mean_s = vec![0.0f32; m_tok];
            if centered {
                for (_, v) in &vecs {
                    for (acc, &x) in mean_s.iter_mut().zip(v) {
                        *acc += x / vecs.len() as f32;
                    }
                }
            }
            let (mut ss, mut sn, mut cs, mut cn) = (0.0f64, 0usize, 0.0f64, 0usize);
            for i in 0..vecs.len() {
                for j in (i + 1)..vecs.len() {
                    let a: Vec<f32> = vecs[i].1.iter().zip(&mean_s).map(|(&x, &m)| x - m).collect();
                    let b: Vec<f32> = vecs[j].1.iter().zip(&mean_s).map(|(&x, &m)| x - m).collect();
                    let c = cc(&a, &b);
                    if vecs[i].0 == vecs[j].0 { ss += c; sn += 1; } else { cs += c; cn += 1; }
                }
            }
            println!(
                "controlled single-object centered={centered}: same {:.4} ({sn}) vs cross {:.4} ({cn})",
                ss / sn.max(1) as f64,
                cs / cn.max(1) as f64
            );
        }
    }

    // per summary variant (levels 0..2 and multi-layer), with and without
    // across-image centering
    for variant in 0..4usize {
        for centered in [false, true] {
            let vecs: Vec<(usize, Vec<f32>)> = group
                .iter()
                .map(|g| (g.0, g.2[variant].clone()))
                .collect();
            let m_tok = vecs[0].1.len();
            let mut mean_s = vec![0.0f32; m_tok];
            if centered {
                for (_, v) in &vecs {
                    for (acc, &x) in mean_s.iter_mut().zip(v) {
                        *acc += x / vecs.len() as f32;
                    }
                }
            }
            let (mut ss, mut sn, mut cs, mut cn) = (0.0f64, 0usize, 0.0f64, 0usize);
            for i in 0..vecs.len() {
                for j in (i + 1)..vecs.len() {
                    let a: Vec<f32> = vecs[i].1.iter().zip(&mean_s).map(|(&x, &m)| x - m).collect();
                    let b: Vec<f32> = vecs[j].1.iter().zip(&mean_s).map(|(&x, &m)| x - m).collect();
                    let c = cc(&a, &b);
                    if vecs[i].0 == vecs[j].0 { ss += c; sn += 1; } else { cs += c; cn += 1; }
                }
            }
            println!(
                "variant {variant} centered={centered}: same {:.4} ({sn}) vs cross {:.4} ({cn})",
                ss / sn.max(1) as f64,
                cs / cn.max(1) as f64
            );
        }
    }
    println!(
        "classes {cat_a}/{cat_b}, {} scenes; inside {:.4} vs outside {:.4}",
        group.len(),
        ins / ins_n.max(1.0), outs / outs_n.max(1.0)
    );

    // per-level post-norm diff selectivity
    for level in 0..3usize {
        let (mut li, mut lin, mut lo, mut lon) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..val.len() {
            let probe = probe_forward(&model, i, &val.image(i), &val.voxel(i)).unwrap();
            let (raw, h, w) = &probe.raw_rows[level];
            let (fused, _, _) = &probe.fused_rows[level];
            let base = ops::layer_norm(raw, &block.gamma, &block.beta, LN_EPS).unwrap();
            let (_, abs_map) = feature_diff(&base, fused, *h, *w).unwrap();
            let stride = pact_core::perceptron::STRIDES[level] as f32;
            for gy in 0..*h {
                for gx in 0..*w {
                    let cx = (gx as f32 + 0.5) * stride;
                    let cy = (gy as f32 + 0.5) * stride;
                    let inside = val.annotations(i).iter().any(|ann| {
                        let b = ann.box_xyxy;
                        cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3]
                    });
                    let v = abs_map.data()[gy * *w + gx] as f64;
                    if inside { li += v; lin += 1.0; } else { lo += v; lon += 1.0; }
                }
            }
        }
        println!(
            "level {level}: inside {:.4} ({:.0} cells) vs outside {:.4} ({:.0} cells)",
            li / lin.max(1.0), lin, lo / lon.max(1.0), lon
        );
    }

    // diagnostic: attention sharpness and pre-norm injection selectivity
    let mut entropy_sum = 0.0f64;
    let mut entropy_n = 0.0f64;
    let (mut inj_in, mut inj_in_n, mut inj_out, mut inj_out_n) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..val.len().min(12) {
        let probe = probe_forward(&model, i, &val.image(i), &val.voxel(i)).unwrap();
        let tokens = model.voxel_path.as_ref().unwrap().tokens(&val.voxel(i)).unwrap();
        let v_mat = ops::matmul(&tokens, &block.w_v).unwrap();
        for (level, ap) in probe.attention.iter().enumerate() {
            let m = ap.attn.cols_2d();
            for row in ap.attn.data().chunks_exact(m) {
                let h: f64 = row
                    .iter()
                    .map(|&p| {
                        let p = p.max(1e-12) as f64;
                        -p * p.ln()
                    })
                    .sum();
                entropy_sum += h;
                entropy_n += 1.0;
            }
            let o = ops::matmul(&ap.attn, &v_mat).unwrap();
            let inj = ops::matmul(&o, &block.w_o).unwrap();
            let (h, w) = (probe.raw_rows[level].1, probe.raw_rows[level].2);
            let d = inj.cols_2d();
            let stride = pact_core::perceptron::STRIDES[level] as f32;
            for gy in 0..h {
                for gx in 0..w {
                    let cx = (gx as f32 + 0.5) * stride;
                    let cy = (gy as f32 + 0.5) * stride;
                    let inside = val.annotations(i).iter().any(|ann| {
                        let b = ann.box_xyxy;
                        cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3]
                    });
                    let n = gy * w + gx;
                    let mag: f64 = inj.data()[n * d..(n + 1) * d]
                        .iter()
                        .map(|&x| x.abs() as f64)
                        .sum::<f64>()
                        / d as f64;
                    if inside { inj_in += mag; inj_in_n += 1.0; } else { inj_out += mag; inj_out_n += 1.0; }
                }
            }
        }
    }
    println!(
        "attention entropy {:.3} (uniform {:.3}); theta {:.3}; |O·Wo| inside {:.4} vs outside {:.4}",
        entropy_sum / entropy_n.max(1.0),
        (16f64).ln(),
        block.theta,
        inj_in / inj_in_n.max(1.0),
        inj_out / inj_out_n.max(1.0)
    );
}

#[test]
#[ignore]
fn ordering_experiment_single_seed() {
    let t_start = std::time::Instant::now();
    let cfg = RunConfig::desk_default();
    let seed = 0u64;
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&cfg, seed, dir.path()).unwrap();
    let train = Dataset::load(&dir.path().join("train/manifest.json")).unwrap();
    let val = Dataset::load(&dir.path().join("val/manifest.json")).unwrap();
    println!("datasets ready at {:?}", t_start.elapsed());

    let (dec, ridge, _) = pretrain(&train, &cfg, seed).unwrap();
    println!("pretrain done at {:?}", t_start.elapsed());

    let mut runs: Vec<(&str, FusionMode, bool)> = vec![
        ("full", FusionMode::CrossAttn, true),
        ("none", FusionMode::None, false),
        ("concat", FusionMode::Concat, true),
        ("wopre", FusionMode::CrossAttn, false),
    ];
    for (name, mode, use_pretrained) in runs.drain(..) {
        let mut c = cfg.clone();
        c.vp.fusion = mode;
        let dec_ref = if mode == FusionMode::None {
            None
        } else if use_pretrained {
            Some((&dec, &ridge))
        } else {
            None
        };
        let (model, log) = train_vp(&train, dec_ref, &c, seed).unwrap();
        let (det_ap, det_ar100, seg_ap, seg_ar100) = eval_model(&model, &val, &c);
        println!(
            "{name:>7}: det AP {:.3} AR100 {:.3} | seg AP {:.3} AR100 {:.3} | final loss {:.3} | t={:?}",
            det_ap,
            det_ar100,
            seg_ap,
            seg_ar100,
            log.entries.last().unwrap().total,
            t_start.elapsed()
        );
    }
}
