//! Synthetic scene + voxel generator.
//!
//! Scenes are colored geometric shapes with exact instance masks. The paired
//! voxel vector is a fixed seeded random projection of a scene descriptor
//! (category histogram + coarse occupancy grid) plus optional noise, so by
//! construction the voxel channel carries multi-object category counts and
//! coarse locations — the signal the downstream fusion is supposed to mine.
//! Teacher targets g and z are fixed seeded projections of the same
//! descriptor concatenated with a downsampled copy of the image.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{GeneratorConfig, RunConfig};
use crate::data::blob::write_tensor_blob;
use crate::data::manifest::{
    blob_ref_for, DatasetManifest, GeneratorStamp, InstanceAnnotation, ManifestBlobs,
    MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, mix_seed, rng_from};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "ring", "diamond", "cross", "hbar", "vbar",
];

/// Downsampled-image side used in the teacher feature.
const TEACHER_IMG_SIDE: usize = 8;

// rng stream tags
const STREAM_PROJ: u64 = 0x70726f6a; // fixed projections
const STREAM_TRAIN: u64 = 0x7472_6169;
const STREAM_VAL: u64 = 0x76616c00;

#[derive(Debug, Clone)]
pub struct SceneInstance {
    pub category_id: usize,
    pub box_xyxy: [f32; 4],
    /// Visible-pixel mask, H×W in {0,1}.
    pub mask: Tensor,
}

/// One fully rendered sample, before serialization.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: Tensor,
    pub instances: Vec<SceneInstance>,
    pub voxel: Tensor,
    pub teacher_g: Tensor,
    pub teacher_z: Tensor,
}

/// Fixed projection matrices shared by every sample of a dataset.
struct Projections {
    voxel: Tensor,   // [d_v, d_desc]
    teacher_g: Tensor, // [T*D, d_feat]
    teacher_z: Tensor, // [c*h*w, d_feat]
}

fn descriptor_dim(cfg: &GeneratorConfig) -> usize {
    cfg.categories + cfg.occupancy_grid * cfg.occupancy_grid
}

fn feature_dim(cfg: &GeneratorConfig, channels: usize) -> usize {
    descriptor_dim(cfg) + channels * TEACHER_IMG_SIDE * TEACHER_IMG_SIDE
}

fn make_projections(run: &RunConfig, seed: u64) -> Projections {
    let g = &run.generator;
    let d = &run.dims;
    let d_desc = descriptor_dim(g);
    let d_feat = feature_dim(g, d.image_channels);
    let latent_len = d.latent[0] * d.latent[1] * d.latent[2];
    let mut rng = rng_from(seed, STREAM_PROJ);
    let voxel = Tensor::randn(
        &[d.voxel_dim, d_desc],
        1.0 / (d_desc as f32).sqrt(),
        &mut rng,
    );
    let teacher_g = Tensor::randn(
        &[d.tokens * d.token_dim, d_feat],
        1.0 / (d_feat as f32).sqrt(),
        &mut rng,
    );
    let teacher_z = Tensor::randn(
        &[latent_len, d_feat],
        1.0 / (d_feat as f32).sqrt(),
        &mut rng,
    );
    Projections {
        voxel,
        teacher_g,
        teacher_z,
    }
}

/// Occupancy entries are scaled down so category semantics dominate the
/// descriptor's energy, mirroring recordings that are semantically rich but
/// only coarsely spatial.
const OCCUPANCY_SCALE: f32 = 0.5;

/// Category histogram (counts / max_objects) ++ scaled occupancy fractions.
pub fn scene_descriptor(
    cfg: &GeneratorConfig,
    image_size: usize,
    instances: &[SceneInstance],
) -> Vec<f32> {
    let grid = cfg.occupancy_grid;
    let mut desc = vec![0.0f32; descriptor_dim(cfg)];
    for inst in instances {
        desc[inst.category_id] += 1.0 / cfg.max_objects as f32;
    }
    let cell = image_size as f32 / grid as f32;
    for inst in instances {
        let m = &inst.mask;
        for y in 0..image_size {
            for x in 0..image_size {
                if m.data()[y * image_size + x] > 0.5 {
                    let gy = ((y as f32 / cell) as usize).min(grid - 1);
                    let gx = ((x as f32 / cell) as usize).min(grid - 1);
                    desc[cfg.categories + gy * grid + gx] += 1.0;
                }
            }
        }
    }
    let cell_px = cell * cell;
    for v in desc[cfg.categories..].iter_mut() {
        *v *= OCCUPANCY_SCALE / cell_px;
    }
    desc
}

fn inside_shape(cat: usize, dx: f32, dy: f32, r: f32) -> bool {
    match cat {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.9 * r && dy.abs() <= 0.9 * r,
        2 => dy >= -r && dy <= r && dx.abs() <= 0.6 * (dy + r),
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.25 * r * r
        }
        4 => dx.abs() + dy.abs() <= r,
        5 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        6 => dx.abs() <= r && dy.abs() <= r / 3.0,
        7 => dx.abs() <= r / 3.0 && dy.abs() <= r,
        _ => unreachable!("category out of range"),
    }
}

const MIN_VISIBLE_PX: usize = 8;

/// Render one scene. The per-sample rng stream fully determines the result.
fn render_scene(run: &RunConfig, rng: &mut ChaCha8Rng) -> (Tensor, Vec<SceneInstance>) {
    let g = &run.generator;
    let s = run.dims.image_size;
    let c = run.dims.image_channels;

    'scene: loop {
        let n_obj = rng.random_range(g.min_objects..=g.max_objects);
        let bg = rng.random_range(0.05f32..0.20);
        // smooth unannotated background texture: a gradient plus soft blobs
        let grad_x = rng.random_range(-0.08f32..0.08) / s as f32;
        let grad_y = rng.random_range(-0.08f32..0.08) / s as f32;
        let n_blobs = rng.random_range(2..=4);
        let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..n_blobs)
            .map(|_| {
                (
                    rng.random_range(0.0..s as f32),
                    rng.random_range(0.0..s as f32),
                    rng.random_range(10.0..28.0),
                    [
                        rng.random_range(-0.06f32..0.06),
                        rng.random_range(-0.06f32..0.06),
                        rng.random_range(-0.06f32..0.06),
                    ],
                )
            })
            .collect();
        // proposal list: (cat, cy, cx, r, color, alpha)
        let mut placed: Vec<(usize, f32, f32, f32, [f32; 3], f32)> = Vec::new();
        for _ in 0..n_obj {
            let cat = rng.random_range(0..g.categories);
            let r = rng.random_range(g.min_radius as f32..=g.max_radius as f32);
            let mut best = None;
            for _try in 0..10 {
                let cy = rng.random_range(r..(s as f32 - r));
                let cx = rng.random_range(r..(s as f32 - r));
                let crowded = placed.iter().any(|&(_, py, px, pr, _, _)| {
                    let dy = py - cy;
                    let dx = px - cx;
                    (dy * dy + dx * dx).sqrt() < 0.8 * (pr + r)
                });
                if !crowded {
                    best = Some((cy, cx));
                    break;
                }
            }
            let Some((cy, cx)) = best else { continue };
            let color = [
                rng.random_range(0.25f32..1.0),
                rng.random_range(0.25f32..1.0),
                rng.random_range(0.25f32..1.0),
            ];
            let alpha = rng.random_range(0.30f32..0.85);
            placed.push((cat, cy, cx, r, color, alpha));
        }
        if placed.is_empty() {
            continue 'scene;
        }

        // topmost-instance index per pixel; later objects draw over earlier
        let mut top = vec![usize::MAX; s * s];
        for (idx, &(cat, cy, cx, r, _, _)) in placed.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    if inside_shape(cat, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r) {
                        top[y * s + x] = idx;
                    }
                }
            }
        }

        let mut image = Tensor::full(&[c, s, s], bg);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let mut v = grad_x * x as f32 + grad_y * y as f32;
                    for &(by, bx, br, col) in &blobs {
                        let dy = y as f32 - by;
                        let dx = x as f32 - bx;
                        v += col[ch.min(2)] * (-(dx * dx + dy * dy) / (2.0 * br * br)).exp();
                    }
                    let p = &mut image.data_mut()[(ch * s + y) * s + x];
                    *p = (*p + v).clamp(0.0, 1.0);
                }
            }
        }
        let mut instances = Vec::new();
        for (idx, &(cat, _, _, _, color, alpha)) in placed.iter().enumerate() {
            let mut mask = Tensor::zeros(&[s, s]);
            let mut count = 0usize;
            let (mut x1, mut y1, mut x2, mut y2) = (s, s, 0usize, 0usize);
            for y in 0..s {
                for x in 0..s {
                    if top[y * s + x] == idx {
                        mask.data_mut()[y * s + x] = 1.0;
                        count += 1;
                        x1 = x1.min(x);
                        y1 = y1.min(y);
                        x2 = x2.max(x);
                        y2 = y2.max(y);
                        for ch in 0..c {
                            let p = &mut image.data_mut()[(ch * s + y) * s + x];
                            let col = color[ch.min(2)];
                            *p = alpha * col + (1.0 - alpha) * *p;
                        }
                    }
                }
            }
            if count < MIN_VISIBLE_PX {
                continue;
            }
            instances.push(SceneInstance {
                category_id: cat,
                // pixel (x, y) covers [x, x+1) × [y, y+1)
                box_xyxy: [x1 as f32, y1 as f32, (x2 + 1) as f32, (y2 + 1) as f32],
                mask,
            });
        }
        if instances.is_empty() {
            continue 'scene;
        }

        if g.image_noise > 0.0 {
            for v in image.data_mut() {
                let n: f32 = StandardNormal.sample(rng);
                *v = (*v + g.image_noise * n).clamp(0.0, 1.0);
            }
        }
        return (image, instances);
    }
}

fn downsample_image(image: &Tensor, side: usize) -> Vec<f32> {
    let c = image.shape()[0];
    let s = image.shape()[1];
    let block = s / side;
    let mut out = vec![0.0f32; c * side * side];
    for ch in 0..c {
        for gy in 0..side {
            for gx in 0..side {
                let mut acc = 0.0;
                for y in gy * block..(gy + 1) * block {
                    for x in gx * block..(gx + 1) * block {
                        acc += image.data()[(ch * s + y) * s + x];
                    }
                }
                out[(ch * side + gy) * side + gx] = acc / (block * block) as f32;
            }
        }
    }
    out
}

fn project(m: &Tensor, v: &[f32]) -> Vec<f32> {
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    debug_assert_eq!(cols, v.len());
    let mut out = vec![0.0f32; rows];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m.data()[r * cols..(r + 1) * cols];
        *o = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
    }
    out
}

/// Generate one sample given its dedicated rng stream.
fn generate_sample(run: &RunConfig, proj: &Projections, rng: &mut ChaCha8Rng) -> SceneSample {
    let d = &run.dims;
    let g = &run.generator;
    let (image, instances) = render_scene(run, rng);
    let desc = scene_descriptor(g, d.image_size, &instances);

    let mut voxel = project(&proj.voxel, &desc);
    if g.noise_sigma > 0.0 {
        for v in voxel.iter_mut() {
            let n: f32 = StandardNormal.sample(rng);
            *v += g.noise_sigma * n;
        }
    }

    // the high-level teacher is semantics-dominated, the low-level teacher
    // pixel-dominated, mirroring the roles of the embeddings they stand for
    let img_ds = downsample_image(&image, TEACHER_IMG_SIDE);
    let weighted = |w_desc: f32, w_img: f32| -> Vec<f32> {
        desc.iter()
            .map(|&v| v * w_desc)
            .chain(img_ds.iter().map(|&v| v * w_img))
            .collect()
    };
    // rough energy balance: 24 descriptor dims vs 192 image dims
    let g_feat = weighted(1.0, 0.25);
    let z_feat = weighted(0.1, 1.0);
    let teacher_g = Tensor::from_vec(
        &[d.tokens, d.token_dim],
        project(&proj.teacher_g, &g_feat),
    )
    .expect("teacher_g shape");
    let teacher_z = Tensor::from_vec(
        &[d.latent[0], d.latent[1], d.latent[2]],
        project(&proj.teacher_z, &z_feat),
    )
    .expect("teacher_z shape");

    SceneSample {
        image,
        instances,
        voxel: Tensor::from_vec(&[d.voxel_dim], voxel).expect("voxel shape"),
        teacher_g,
        teacher_z,
    }
}

/// Generate `count` samples for a split. Per-sample rng streams are derived
/// as mix(seed, split ⊕ sample index) so generation order is irrelevant.
pub fn generate_samples(
    run: &RunConfig,
    seed: u64,
    split_stream: u64,
    count: usize,
) -> Vec<SceneSample> {
    let proj = make_projections(run, seed);
    (0..count)
        .map(|i| {
            let mut rng = rng_from(mix_seed(seed, split_stream), i as u64);
            generate_sample(run, &proj, &mut rng)
        })
        .collect()
}

fn write_split(
    run: &RunConfig,
    seed: u64,
    split: &str,
    split_stream: u64,
    count: usize,
    dir: &Path,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config {
            key: format!("generator.{split}_count"),
            msg: "sample count must be >= 1".into(),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = generate_samples(run, seed, split_stream, count);
    let d = &run.dims;
    let s = d.image_size;
    let c = d.image_channels;

    let mut images = Tensor::zeros(&[count, c, s, s]);
    let mut voxels = Tensor::zeros(&[count, d.voxel_dim]);
    let mut g = Tensor::zeros(&[count, d.tokens, d.token_dim]);
    let mut z = Tensor::zeros(&[count, d.latent[0], d.latent[1], d.latent[2]]);
    let total_instances: usize = samples.iter().map(|smp| smp.instances.len()).sum();
    let mut masks = Tensor::zeros(&[total_instances, s, s]);
    let mut annotations = Vec::with_capacity(count);

    let mut mask_cursor = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        let img_len = c * s * s;
        images.data_mut()[i * img_len..(i + 1) * img_len].copy_from_slice(sample.image.data());
        voxels.data_mut()[i * d.voxel_dim..(i + 1) * d.voxel_dim]
            .copy_from_slice(sample.voxel.data());
        let g_len = d.tokens * d.token_dim;
        g.data_mut()[i * g_len..(i + 1) * g_len].copy_from_slice(sample.teacher_g.data());
        let z_len = d.latent.iter().product::<usize>();
        z.data_mut()[i * z_len..(i + 1) * z_len].copy_from_slice(sample.teacher_z.data());

        let mut anns = Vec::with_capacity(sample.instances.len());
        for inst in &sample.instances {
            masks.data_mut()[mask_cursor * s * s..(mask_cursor + 1) * s * s]
                .copy_from_slice(inst.mask.data());
            anns.push(InstanceAnnotation {
                category_id: inst.category_id,
                box_xyxy: inst.box_xyxy,
                mask_index: mask_cursor,
            });
            mask_cursor += 1;
        }
        annotations.push(anns);
    }

    write_tensor_blob(&images, &dir.join("images.bin"))?;
    write_tensor_blob(&voxels, &dir.join("voxels.bin"))?;
    write_tensor_blob(&g, &dir.join("teacher_g.bin"))?;
    write_tensor_blob(&z, &dir.join("teacher_z.bin"))?;
    write_tensor_blob(&masks, &dir.join("masks.bin"))?;

    let gen_json = serde_json::to_string(&run.generator)?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        split: split.to_string(),
        sample_count: count,
        category_names: (0..run.generator.categories)
            .map(|i| {
                SHAPE_NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("shape{i}"))
            })
            .collect(),
        image_shape: [c, s, s],
        voxel_dim: d.voxel_dim,
        blobs: ManifestBlobs {
            images: blob_ref_for("images.bin", images.shape(), dir)?,
            voxels: blob_ref_for("voxels.bin", voxels.shape(), dir)?,
            teacher_g: blob_ref_for("teacher_g.bin", g.shape(), dir)?,
            teacher_z: blob_ref_for("teacher_z.bin", z.shape(), dir)?,
            masks: blob_ref_for("masks.bin", masks.shape(), dir)?,
        },
        annotations,
        generator: Some(GeneratorStamp {
            seed,
            config: run.generator.clone(),
            config_hash: format!("{:016x}", fnv1a(gen_json.as_bytes())),
            version: crate::config::code_version(),
        }),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Generate train/ and val/ splits under `out_dir`.
pub fn generate_synthetic_dataset(
    run: &RunConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let train = write_split(
        run,
        seed,
        "train",
        STREAM_TRAIN,
        run.generator.train_count,
        &out_dir.join("train"),
    )?;
    let val = write_split(
        run,
        seed,
        "val",
        STREAM_VAL,
        run.generator.val_count,
        &out_dir.join("val"),
    )?;
    Ok((train, val))
}
