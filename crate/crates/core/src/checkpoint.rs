//! Checkpoints: a JSON index plus one PACTBLOB file per named tensor, the
//! same storage format as the dataset. Identical seeds produce byte-identical
//! checkpoint directories.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{code_version, FusionMode, RunConfig};
use crate::data::{read_tensor_blob, write_tensor_blob};
use crate::decoder::{AttachPoints, DecoderAdapters, DecoderDims, DecoderWeights, RidgeMap};
use crate::error::{Error, Result};
use crate::perceptron::{VoxelPath, VpDims, VpModel, VpWeights};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub kind: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Extra scalars: fusion mode, lora rank, ridge lambda, temperature.
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn write_bundle(
    dir: &Path,
    kind: &str,
    cfg: &RunConfig,
    seed: u64,
    extra: BTreeMap<String, serde_json::Value>,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    std::fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
    let mut index = CheckpointIndex {
        kind: kind.to_string(),
        version: code_version(),
        config_hash: cfg.hash(),
        seed,
        config: cfg.clone(),
        extra,
        tensors: BTreeMap::new(),
    };
    for (name, tensor) in tensors {
        let file = format!("tensors/{name}.bin");
        write_tensor_blob(tensor, &dir.join(&file))?;
        index.tensors.insert(
            name.clone(),
            TensorEntry {
                file,
                shape: tensor.shape().to_vec(),
            },
        );
    }
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(dir.join("checkpoint.json"), json).map_err(|e| Error::io(dir, e))
}

fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join("checkpoint.json");
    let json = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&json)?;
    // integrity: the embedded config must reproduce the recorded hash
    if index.config.hash() != index.config_hash {
        return Err(Error::Config {
            key: "config_hash".into(),
            msg: format!(
                "checkpoint config hash {} does not match embedded config {}",
                index.config_hash,
                index.config.hash()
            ),
        });
    }
    Ok(index)
}

fn load_into(dir: &Path, index: &CheckpointIndex, named: &mut [(String, &mut Tensor)]) -> Result<()> {
    for (name, slot) in named.iter_mut() {
        let entry = index.tensors.get(name).ok_or_else(|| Error::Config {
            key: format!("tensors.{name}"),
            msg: "missing tensor in checkpoint".into(),
        })?;
        let t = read_tensor_blob(&dir.join(&entry.file))?;
        if t.shape() != slot.shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint_load",
                expected: slot.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        **slot = t;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// decoder checkpoints
// ---------------------------------------------------------------------------

pub fn save_decoder(
    dir: &Path,
    weights: &DecoderWeights,
    ridge: &RidgeMap,
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    let mut tensors = weights.named_tensors();
    tensors.push(("ridge.weights".to_string(), &ridge.weights));
    let mut extra = BTreeMap::new();
    extra.insert(
        "ridge_lambda".into(),
        serde_json::json!(ridge.lambda),
    );
    write_bundle(dir, "decoder", cfg, seed, extra, &tensors)
}

pub fn load_decoder(dir: &Path) -> Result<(DecoderWeights, RidgeMap, CheckpointIndex)> {
    let index = read_index(dir)?;
    if index.kind != "decoder" {
        return Err(Error::Config {
            key: "kind".into(),
            msg: format!("expected a decoder checkpoint, found `{}`", index.kind),
        });
    }
    let dims = DecoderDims::from_run(&index.config.dims);
    let mut weights = DecoderWeights::init(dims, &mut rng_from(0, 0));
    load_into(dir, &index, &mut weights.named_tensors_mut())?;
    let lambda = index
        .extra
        .get("ridge_lambda")
        .and_then(|v| v.as_f64())
        .unwrap_or(0.0) as f32;
    let entry = index.tensors.get("ridge.weights").ok_or_else(|| Error::Config {
        key: "tensors.ridge.weights".into(),
        msg: "missing ridge weights".into(),
    })?;
    let ridge = RidgeMap {
        weights: read_tensor_blob(&dir.join(&entry.file))?,
        lambda,
    };
    Ok((weights, ridge, index))
}

// ---------------------------------------------------------------------------
// perceptron checkpoints
// ---------------------------------------------------------------------------

fn adapter_tensor_list(adapters: &DecoderAdapters) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    if let Some(t) = &adapters.tokenizer {
        out.push(("lora.tokenizer.a".into(), &t.a));
        out.push(("lora.tokenizer.b".into(), &t.b));
    }
    for (i, (a1, a2)) in adapters.blocks.iter().enumerate() {
        out.push((format!("lora.block{i}.lin1.a"), &a1.a));
        out.push((format!("lora.block{i}.lin1.b"), &a1.b));
        out.push((format!("lora.block{i}.lin2.a"), &a2.a));
        out.push((format!("lora.block{i}.lin2.b"), &a2.b));
    }
    out
}

pub fn save_vp(dir: &Path, model: &VpModel, cfg: &RunConfig, seed: u64) -> Result<()> {
    let theta = Tensor::scalar(model.vp.fusion.as_ref().map(|f| f.theta).unwrap_or(0.0));
    let mut tensors = model.vp.named_tensors();
    if model.vp.fusion.is_some() {
        tensors.push(("fusion.theta".into(), &theta));
    }
    let mut extra = BTreeMap::new();
    extra.insert("fusion_mode".into(), serde_json::json!(model.mode));
    if let Some(path) = &model.voxel_path {
        for (name, t) in path.decoder.named_tensors() {
            tensors.push((format!("decoder.{name}"), t));
        }
        tensors.push(("ridge.weights".into(), &path.ridge.weights));
        extra.insert("ridge_lambda".into(), serde_json::json!(path.ridge.lambda));
        if let Some(ad) = &path.adapters {
            extra.insert("lora_rank".into(), serde_json::json!(ad.rank));
            tensors.extend(adapter_tensor_list(ad));
        }
    }
    write_bundle(dir, "vp", cfg, seed, extra, &tensors)
}

pub fn load_vp(dir: &Path) -> Result<(VpModel, CheckpointIndex)> {
    let index = read_index(dir)?;
    if index.kind != "vp" {
        return Err(Error::Config {
            key: "kind".into(),
            msg: format!("expected a perceptron checkpoint, found `{}`", index.kind),
        });
    }
    let mode: FusionMode = serde_json::from_value(
        index
            .extra
            .get("fusion_mode")
            .cloned()
            .ok_or_else(|| Error::Config {
                key: "extra.fusion_mode".into(),
                msg: "missing fusion mode".into(),
            })?,
    )?;
    let dims = VpDims::from_run(&index.config);
    let mut vp = VpWeights::init(dims, mode, &mut rng_from(0, 0));
    load_into(dir, &index, &mut vp.named_tensors_mut())?;
    if let Some(f) = vp.fusion.as_mut() {
        let entry = index.tensors.get("fusion.theta").ok_or_else(|| Error::Config {
            key: "tensors.fusion.theta".into(),
            msg: "missing temperature".into(),
        })?;
        f.theta = read_tensor_blob(&dir.join(&entry.file))?.data()[0];
    }

    let voxel_path = if mode == FusionMode::None {
        None
    } else {
        let dec_dims = DecoderDims::from_run(&index.config.dims);
        let mut decoder = DecoderWeights::init(dec_dims, &mut rng_from(0, 0));
        {
            let mut named = decoder.named_tensors_mut();
            for (name, _) in named.iter_mut() {
                *name = format!("decoder.{name}");
            }
            load_into(dir, &index, &mut named)?;
        }
        let lambda = index
            .extra
            .get("ridge_lambda")
            .and_then(|v| v.as_f64())
            .unwrap_or(0.0) as f32;
        let entry = index.tensors.get("ridge.weights").ok_or_else(|| Error::Config {
            key: "tensors.ridge.weights".into(),
            msg: "missing ridge weights".into(),
        })?;
        let ridge = RidgeMap {
            weights: read_tensor_blob(&dir.join(&entry.file))?,
            lambda,
        };
        let adapters = match index.extra.get("lora_rank").and_then(|v| v.as_u64()) {
            Some(rank) => {
                let mut ad = DecoderAdapters::init(
                    &decoder,
                    rank as usize,
                    AttachPoints::default(),
                    &mut rng_from(0, 0),
                )?;
                let mut named: Vec<(String, &mut Tensor)> = Vec::new();
                if let Some(t) = ad.tokenizer.as_mut() {
                    named.push(("lora.tokenizer.a".into(), &mut t.a));
                    named.push(("lora.tokenizer.b".into(), &mut t.b));
                }
                for (i, (a1, a2)) in ad.blocks.iter_mut().enumerate() {
                    named.push((format!("lora.block{i}.lin1.a"), &mut a1.a));
                    named.push((format!("lora.block{i}.lin1.b"), &mut a1.b));
                    named.push((format!("lora.block{i}.lin2.a"), &mut a2.a));
                    named.push((format!("lora.block{i}.lin2.b"), &mut a2.b));
                }
                load_into(dir, &index, &mut named)?;
                Some(ad)
            }
            None => None,
        };
        Some(VoxelPath {
            decoder,
            ridge,
            adapters,
        })
    };

    Ok((
        VpModel {
            mode,
            vp,
            voxel_path,
        },
        index,
    ))
}
