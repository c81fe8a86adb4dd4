//! `pact` — operator surface for the voxel-conditioned detection sandbox.
//!
//! Subcommands: synth, pretrain, train, eval, ablate, probe. Every artifact
//! embeds the config hash, the seed and the code version. Evaluation may
//! parallelize across images, capped by the PA_THREADS environment variable.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pact_core::checkpoint;
use pact_core::config::{code_version, FusionMode, RunConfig};
use pact_core::data::{generate_synthetic_dataset, Dataset};
use pact_core::decoder;
use pact_core::fusion::{ProbeGrid, ProbeRecord};
use pact_core::metrics::{coco_summary, Detection, EvalReport, GroundTruth, Task};
use pact_core::perceptron::{infer, probe_forward, train_vp, VpModel};

#[derive(Parser)]
#[command(name = "pact", version, about = "Voxel-conditioned detection sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FusionArg {
    CrossAttn,
    Concat,
    None,
}

impl From<FusionArg> for FusionMode {
    fn from(v: FusionArg) -> Self {
        match v {
            FusionArg::CrossAttn => FusionMode::CrossAttn,
            FusionArg::Concat => FusionMode::Concat,
            FusionArg::None => FusionMode::None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProbeKind {
    Attention,
    Diff,
    Weights,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/ and val/ synthetic splits under --out.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the voxel decoder on a split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the visual perceptron.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Decoder checkpoint directory; omit for a randomly initialized
        /// voxel path (or with --fusion none).
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Adapter rank.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a perceptron checkpoint on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid: `--grid ranks=2,4,8,16,32` or `--grid components`.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract inspection data: attention summaries, fusion difference maps
    /// or first-layer weight statistics.
    Probe {
        #[arg(long, value_enum)]
        kind: ProbeKind,
        /// Comma-separated image indices (attention/diff).
        #[arg(long, default_value = "0")]
        images: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let json = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&json).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::desk_default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ground_truths(ds: &Dataset) -> Vec<GroundTruth> {
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

fn write_jsonl<T: serde::Serialize>(
    path: &Path,
    header: &serde_json::Value,
    rows: &[T],
) -> Result<()> {
    let mut lines = vec![header.to_string()];
    for row in rows {
        lines.push(serde_json::to_string(row)?);
    }
    fs::write(path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))
}

fn stamp(cfg_hash: &str, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg_hash,
        "seed": seed,
        "version": code_version(),
    })
}

fn cmd_synth(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let cfg = load_config(&config, seed)?;
    let (train, val) = generate_synthetic_dataset(&cfg, cfg.seed, &out)?;
    println!("{}", out.join("train/manifest.json").display());
    println!("{}", out.join("val/manifest.json").display());
    println!(
        "synth: {} train / {} val samples (config {} seed {})",
        train.sample_count,
        val.sample_count,
        cfg.hash(),
        cfg.seed
    );
    Ok(())
}

fn cmd_pretrain(
    data: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<()> {
    let cfg = load_config(&config, seed)?;
    let dataset = Dataset::load(&data)?;
    let (weights, ridge, log) = decoder::pretrain(&dataset, &cfg, cfg.seed)?;
    fs::create_dir_all(&out)?;
    checkpoint::save_decoder(&out, &weights, &ridge, &cfg, cfg.seed)?;
    write_jsonl(
        &out.join("pretrain_log.jsonl"),
        &stamp(&cfg.hash(), cfg.seed),
        &log.entries,
    )?;
    let last = log.entries.last().context("no epochs trained")?;
    println!(
        "pretrain: {} epochs, final loss {:.4} (prior {:.4} lowlevel {:.4} contrastive {:.4})",
        log.entries.len(),
        last.total,
        last.l_prior,
        last.l_lowlevel,
        last.l_contrastive
    );
    println!("{}", out.join("checkpoint.json").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    decoder_dir: Option<PathBuf>,
    fusion: Option<FusionArg>,
    rank: Option<usize>,
    out: PathBuf,
) -> Result<()> {
    let mut cfg = load_config(&config, seed)?;
    if let Some(f) = fusion {
        cfg.vp.fusion = f.into();
    }
    if let Some(r) = rank {
        cfg.vp.lora_rank = r;
    }
    cfg.validate()?;
    let dataset = Dataset::load(&data)?;

    let loaded = match &decoder_dir {
        Some(dir) => {
            if cfg.vp.fusion == FusionMode::None {
                bail!("--decoder given but --fusion none ignores voxels entirely");
            }
            let (w, r, index) = checkpoint::load_decoder(dir)?;
            if index.config.dims.voxel_dim != cfg.dims.voxel_dim
                || index.config.dims.tokens != cfg.dims.tokens
                || index.config.dims.token_dim != cfg.dims.token_dim
            {
                bail!(
                    "decoder checkpoint dims (config {}) do not match the run config ({})",
                    index.config_hash,
                    cfg.hash()
                );
            }
            Some((w, r))
        }
        None => None,
    };
    let (model, log) = train_vp(
        &dataset,
        loaded.as_ref().map(|(w, r)| (w, r)),
        &cfg,
        cfg.seed,
    )?;
    fs::create_dir_all(&out)?;
    checkpoint::save_vp(&out, &model, &cfg, cfg.seed)?;
    write_jsonl(
        &out.join("train_log.jsonl"),
        &stamp(&cfg.hash(), cfg.seed),
        &log.entries,
    )?;
    let last = log.entries.last().context("no epochs trained")?;
    println!(
        "train[{}]: {} epochs, final loss {:.4} (det {:.4} mask {:.4})",
        model.mode,
        log.entries.len(),
        last.total,
        last.l_det,
        last.l_mask
    );
    println!("{}", out.join("checkpoint.json").display());
    Ok(())
}

struct SplitEval {
    det: EvalReport,
    seg: EvalReport,
    predictions: Vec<pact_core::perceptron::PredictionRecord>,
}

fn evaluate_split(model: &VpModel, dataset: &Dataset, cfg: &RunConfig) -> Result<SplitEval> {
    let image_size = cfg.dims.image_size;
    if model.mode != FusionMode::None && dataset.voxels.shape()[1] != cfg.dims.voxel_dim {
        bail!("dataset voxel dim does not match the checkpoint config");
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let threads = pact_core::eval_threads();
    let per_image = pact_core::parallel_map(&indices, threads, |&i| {
        let voxel = if model.mode == FusionMode::None {
            None
        } else {
            Some(dataset.voxel(i))
        };
        infer(model, i, &dataset.image(i), voxel.as_ref(), &cfg.vp, &cfg.eval)
    });
    let mut dets: Vec<Detection> = Vec::new();
    let mut predictions = Vec::new();
    for result in per_image {
        let set = result?;
        dets.extend(set.to_metric_detections(image_size));
        predictions.extend(set.to_prediction_records(image_size));
    }
    let gts = ground_truths(dataset);
    let det = coco_summary(&dets, &gts, Task::Det, &cfg.eval)?;
    let seg = coco_summary(&dets, &gts, Task::Seg, &cfg.eval)?;
    Ok(SplitEval {
        det,
        seg,
        predictions,
    })
}

fn write_eval_outputs(
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    dataset: &Dataset,
    eval: &SplitEval,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut report = stamp(&cfg.hash(), seed);
    report["det"] = eval.det.to_table_json();
    report["seg"] = eval.seg.to_table_json();
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;

    let names = &dataset.manifest.category_names;
    let mut csv = format!(
        "# config_hash={} seed={} version={}\ntask,category_id,category,ap50\n",
        cfg.hash(),
        seed,
        code_version()
    );
    for (task, rep) in [("det", &eval.det), ("seg", &eval.seg)] {
        for (cat, ap) in &rep.per_category_ap50 {
            let name = names
                .get(*cat)
                .cloned()
                .unwrap_or_else(|| format!("cat{cat}"));
            csv.push_str(&format!("{task},{cat},{name},{:.1}\n", ap * 100.0));
        }
    }
    fs::write(out.join("percat.csv"), csv)?;
    write_jsonl(
        &out.join("predictions.jsonl"),
        &stamp(&cfg.hash(), seed),
        &eval.predictions,
    )?;
    Ok(())
}

fn cmd_eval(data: PathBuf, ckpt: PathBuf, out: PathBuf) -> Result<()> {
    let (model, index) = checkpoint::load_vp(&ckpt)?;
    let cfg = index.config.clone();
    let dataset = Dataset::load(&data)?;
    if dataset.manifest.category_names.len() != cfg.generator.categories {
        bail!(
            "dataset has {} categories but the checkpoint was trained with {}",
            dataset.manifest.category_names.len(),
            cfg.generator.categories
        );
    }
    let eval = evaluate_split(&model, &dataset, &cfg)?;
    write_eval_outputs(&out, &cfg, index.seed, &dataset, &eval)?;
    println!(
        "eval[{}]: det AP {:.1} AR100 {:.1} | seg AP {:.1} AR100 {:.1}",
        model.mode,
        eval.det.ap * 100.0,
        eval.det.ar_100 * 100.0,
        eval.seg.ap * 100.0,
        eval.seg.ar_100 * 100.0
    );
    println!("{}", out.join("report.json").display());
    Ok(())
}

fn cmd_ablate(data: PathBuf, config: Option<PathBuf>, grid: String, out: PathBuf) -> Result<()> {
    let cfg = load_config(&config, None)?;
    let train = Dataset::load(&data.join("train/manifest.json"))?;
    let val = Dataset::load(&data.join("val/manifest.json"))?;
    fs::create_dir_all(&out)?;

    let mut csv = format!(
        "# config_hash={} seed={} version={}\nvariant,task,ap,ap50,ar1,ar100\n",
        cfg.hash(),
        cfg.seed,
        code_version()
    );
    let push_rows = |csv: &mut String, name: &str, eval: &SplitEval| {
        for (task, rep) in [("det", &eval.det), ("seg", &eval.seg)] {
            csv.push_str(&format!(
                "{name},{task},{:.1},{:.1},{:.1},{:.1}\n",
                rep.ap * 100.0,
                rep.ap50 * 100.0,
                rep.ar_1 * 100.0,
                rep.ar_100 * 100.0
            ));
        }
    };

    if let Some(ranks) = grid.strip_prefix("ranks=") {
        let ranks: Vec<usize> = ranks
            .split(',')
            .map(|r| r.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .context("parsing --grid ranks list")?;
        let (dec, ridge, _) = decoder::pretrain(&train, &cfg, cfg.seed)?;
        for (i, rank) in ranks.iter().enumerate() {
            let mut c = cfg.clone();
            c.vp.lora_rank = *rank;
            c.vp.fusion = FusionMode::CrossAttn;
            let run_seed = pact_core::rng::mix_seed(cfg.seed, 1000 + i as u64);
            let (model, _) = train_vp(&train, Some((&dec, &ridge)), &c, run_seed)?;
            let eval = evaluate_split(&model, &val, &c)?;
            push_rows(&mut csv, &format!("rank{rank}"), &eval);
            println!(
                "ablate rank {rank}: det AP {:.1} AR1 {:.1} | seg AP {:.1} AR1 {:.1}",
                eval.det.ap * 100.0,
                eval.det.ar_1 * 100.0,
                eval.seg.ap * 100.0,
                eval.seg.ar_1 * 100.0
            );
        }
    } else if grid == "components" {
        let (dec, ridge, _) = decoder::pretrain(&train, &cfg, cfg.seed)?;
        let variants: [(&str, FusionMode, bool); 3] = [
            ("full", FusionMode::CrossAttn, true),
            ("w/o fMRI pre-train", FusionMode::CrossAttn, false),
            ("w/o cross-attention", FusionMode::Concat, true),
        ];
        for (i, (name, mode, pretrained)) in variants.iter().enumerate() {
            let mut c = cfg.clone();
            c.vp.fusion = *mode;
            let run_seed = pact_core::rng::mix_seed(cfg.seed, 2000 + i as u64);
            let dec_ref = if *pretrained { Some((&dec, &ridge)) } else { None };
            let (model, _) = train_vp(&train, dec_ref, &c, run_seed)?;
            let eval = evaluate_split(&model, &val, &c)?;
            push_rows(&mut csv, name, &eval);
            println!(
                "ablate {name}: det AP {:.1} | seg AP {:.1}",
                eval.det.ap * 100.0,
                eval.seg.ap * 100.0
            );
        }
    } else {
        bail!("--grid must be `ranks=<list>` or `components`");
    }
    fs::write(out.join("ablation.csv"), csv)?;
    println!("{}", out.join("ablation.csv").display());
    Ok(())
}

fn parse_image_list(images: &str) -> Result<Vec<usize>> {
    images
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("parsing --images"))
        .collect()
}

fn probe_grid_for_tokens(s: &[f32]) -> ProbeGrid {
    let m = s.len();
    let side = (m as f64).sqrt() as usize;
    if side * side == m {
        ProbeGrid {
            h: side,
            w: side,
            values: s.to_vec(),
        }
    } else {
        ProbeGrid {
            h: 1,
            w: m,
            values: s.to_vec(),
        }
    }
}

fn cmd_probe(
    kind: ProbeKind,
    images: String,
    data: Option<PathBuf>,
    ckpt: PathBuf,
    out: PathBuf,
) -> Result<()> {
    fs::create_dir_all(&out)?;
    if kind == ProbeKind::Weights {
        let index_json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(ckpt.join("checkpoint.json"))?)?;
        let kind_str = index_json["kind"].as_str().unwrap_or_default().to_string();
        let (weights, seed, hash) = match kind_str.as_str() {
            "decoder" => {
                let (w, _, index) = checkpoint::load_decoder(&ckpt)?;
                (w, index.seed, index.config_hash)
            }
            "vp" => {
                let (model, index) = checkpoint::load_vp(&ckpt)?;
                let path = model
                    .voxel_path
                    .context("image-only checkpoint has no decoder to probe")?;
                (path.decoder, index.seed, index.config_hash)
            }
            other => bail!("unknown checkpoint kind `{other}`"),
        };
        let stats = decoder::first_layer_stats(&weights);
        let mut doc = stamp(&hash, seed);
        doc["stats"] = serde_json::to_value(&stats)?;
        let path = out.join("probe_weights.json");
        fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
        println!("{}", path.display());
        return Ok(());
    }

    let data = data.context("--data is required for attention/diff probes")?;
    let (model, index) = checkpoint::load_vp(&ckpt)?;
    if model.voxel_path.is_none() {
        bail!("attention/diff probes need a voxel-fused checkpoint");
    }
    let dataset = Dataset::load(&data)?;
    let ids = parse_image_list(&images)?;
    for &id in &ids {
        if id >= dataset.len() {
            bail!(
                "image index {id} out of range (split has {})",
                dataset.len()
            );
        }
        let probe = probe_forward(&model, id, &dataset.image(id), &dataset.voxel(id))?;
        match kind {
            ProbeKind::Attention => {
                let summary = pact_core::fusion::attention_summary(&probe.attention)?;
                let mut records: Vec<ProbeRecord> = summary
                    .per_level
                    .iter()
                    .enumerate()
                    .map(|(level, s)| ProbeRecord {
                        image_id: id,
                        level: level as i64,
                        s: s.clone(),
                        grid: Some(probe_grid_for_tokens(s)),
                    })
                    .collect();
                // level -1 holds the multi-layer average
                records.push(ProbeRecord {
                    image_id: id,
                    level: -1,
                    s: summary.multi_layer.clone(),
                    grid: Some(probe_grid_for_tokens(&summary.multi_layer)),
                });
                let mut doc = stamp(&index.config_hash, index.seed);
                doc["records"] = serde_json::to_value(&records)?;
                let path = out.join(format!("probe_attention_{id}.json"));
                fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
                println!("{}", path.display());
            }
            ProbeKind::Diff => {
                let mut signed_records = Vec::new();
                let mut abs_records = Vec::new();
                for (level, ((raw, h, w), (fused, _, _))) in probe
                    .raw_rows
                    .iter()
                    .zip(probe.fused_rows.iter())
                    .enumerate()
                {
                    let (signed, abs) = pact_core::fusion::feature_diff(raw, fused, *h, *w)?;
                    signed_records.push(ProbeRecord {
                        image_id: id,
                        level: level as i64,
                        s: vec![],
                        grid: Some(ProbeGrid {
                            h: *h,
                            w: *w,
                            values: signed.data().to_vec(),
                        }),
                    });
                    abs_records.push(ProbeRecord {
                        image_id: id,
                        level: level as i64,
                        s: vec![],
                        grid: Some(ProbeGrid {
                            h: *h,
                            w: *w,
                            values: abs.data().to_vec(),
                        }),
                    });
                }
                for (tag, records) in [("signed", signed_records), ("abs", abs_records)] {
                    let mut doc = stamp(&index.config_hash, index.seed);
                    doc["records"] = serde_json::to_value(&records)?;
                    let path = out.join(format!("probe_diff_{tag}_{id}.json"));
                    fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
                    println!("{}", path.display());
                }
            }
            ProbeKind::Weights => unreachable!(),
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, seed, out } => cmd_synth(config, seed, out),
        Command::Pretrain {
            data,
            config,
            seed,
            out,
        } => cmd_pretrain(data, config, seed, out),
        Command::Train {
            data,
            config,
            seed,
            decoder,
            fusion,
            rank,
            out,
        } => cmd_train(data, config, seed, decoder, fusion, rank, out),
        Command::Eval { data, ckpt, out } => cmd_eval(data, ckpt, out),
        Command::Ablate {
            data,
            config,
            grid,
            out,
        } => cmd_ablate(data, config, grid, out),
        Command::Probe {
            kind,
            images,
            data,
            ckpt,
            out,
        } => cmd_probe(kind, images, data, ckpt, out),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
