//! Decoder pretraining: prior MSE + weighted low-level L1 + contrastive
//! term, with voxel mixing during the first third of the epochs and soft
//! targets afterwards. AdamW with a one-cycle schedule, fully deterministic
//! given the seed.

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{epoch_batches, Dataset};
use crate::decoder::model::{
    decoder_backward, decoder_forward, heads_backward, heads_forward, DecoderDims, DecoderWeights,
};
use crate::decoder::ridge::{ridge_fit, RidgeMap};
use crate::error::{Error, Result};
use crate::losses;
use crate::optim::{one_cycle_lr, AdamW};
use crate::rng::{mix_seed, rng_from};
use crate::tensor::{ops, Tensor};

const STREAM_INIT: u64 = 0x6465_6330;
const STREAM_SHUFFLE: u64 = 0x6465_6331;
const STREAM_MIX: u64 = 0x6465_6332;
const STREAM_RIDGE_TARGET: u64 = 0x6465_6333;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    BiMixCo,
    SoftClip,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub l_prior: f32,
    pub l_lowlevel: f32,
    pub l_contrastive: f32,
    pub total: f32,
    pub lr: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<EpochLog>,
}

/// First epoch (zero-based) that uses the soft-target phase.
pub fn phase_switch_epoch(total_epochs: usize) -> usize {
    total_epochs.div_ceil(3)
}

pub fn phase_for_epoch(epoch: usize, total_epochs: usize) -> Phase {
    if epoch < phase_switch_epoch(total_epochs) {
        Phase::BiMixCo
    } else {
        Phase::SoftClip
    }
}

/// Fixed projection used to build the ridge target from teacher embeddings.
/// Shared between pretraining and perceptron training so a randomly
/// initialized decoder still sees the same input map.
pub fn ridge_target_projection(seed: u64, flat: usize, d0: usize) -> Tensor {
    let mut rng = rng_from(seed, STREAM_RIDGE_TARGET);
    Tensor::randn(&[d0, flat], 1.0 / (flat as f32).sqrt(), &mut rng)
}

/// Fit the voxel→input ridge map against a fixed compression of the teacher
/// embeddings.
pub fn fit_input_ridge(dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<RidgeMap> {
    let n = dataset.len();
    let flat: usize = dataset.teacher_g.shape()[1..].iter().product();
    let g_flat = dataset.gather_teacher_g_flat(&(0..n).collect::<Vec<_>>());
    let proj = ridge_target_projection(seed, flat, cfg.dims.decoder_input_dim);
    let m_target = ops::matmul_nt(&g_flat, &proj)?;
    ridge_fit(&dataset.voxels, &m_target, cfg.pretrain.ridge_lambda)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut out = Tensor::zeros(&[idx.len(), stride]);
    for (r, &i) in idx.iter().enumerate() {
        out.data_mut()[r * stride..(r + 1) * stride]
            .copy_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    out
}

pub fn pretrain(
    dataset: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(DecoderWeights, RidgeMap, PretrainLog)> {
    let pc = &cfg.pretrain;
    let dims = DecoderDims::from_run(&cfg.dims);
    let n = dataset.len();
    if dataset.voxels.shape()[1] != cfg.dims.voxel_dim {
        return Err(Error::Config {
            key: "dims.voxel_dim".into(),
            msg: format!(
                "dataset voxel dim {} != config {}",
                dataset.voxels.shape()[1],
                cfg.dims.voxel_dim
            ),
        });
    }

    let ridge = fit_input_ridge(dataset, cfg, seed)?;
    let mut rng = rng_from(seed, STREAM_INIT);
    let mut weights = DecoderWeights::init(dims, &mut rng);

    let latent_len: usize = dims.latent.iter().product();
    let flat = dims.flat();
    let z_all = &dataset.teacher_z;
    let g_all = &dataset.teacher_g;

    let steps_per_epoch = n.div_ceil(pc.batch_size);
    let total_steps = steps_per_epoch * pc.epochs;
    let grads0 = weights.zero_grads();
    let shapes = decoder_param_shapes(&weights);
    let mut opt = AdamW::new(&shapes.0, pc.weight_decay);
    drop(grads0);

    let mut log = PretrainLog {
        seed,
        config_hash: cfg.hash(),
        entries: Vec::with_capacity(pc.epochs),
    };

    let mut global_step = 0usize;
    for epoch in 0..pc.epochs {
        let phase = phase_for_epoch(epoch, pc.epochs);
        let batches = epoch_batches(n, pc.batch_size, mix_seed(seed, STREAM_SHUFFLE), epoch)?;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut last_lr = 0.0f32;
        for (batch_idx, idx) in batches.iter().enumerate() {
            let b = idx.len();
            let v_b = dataset.gather_voxels(idx);
            let g_b = gather_rows(g_all, idx); // [b, T*D]
            let z_b = gather_rows(z_all, idx); // [b, c*h*w]

            // mixing only in the first phase
            let mix = if phase == Phase::BiMixCo && b >= 2 {
                let mut mix_rng = rng_from(
                    mix_seed(seed, STREAM_MIX),
                    (epoch * 100_000 + batch_idx) as u64,
                );
                Some(losses::MixBatch::sample(b, pc.mix_beta, &mut mix_rng))
            } else {
                None
            };
            let (v_in, g_target, z_target) = match &mix {
                Some(mx) => (
                    losses::mixco_mix(&v_b, &mx.lambda, &mx.partner)?,
                    losses::mixco_mix(&g_b, &mx.lambda, &mx.partner)?,
                    losses::mixco_mix(&z_b, &mx.lambda, &mx.partner)?,
                ),
                None => (v_b, g_b.clone(), z_b),
            };

            let m = ridge.apply(&v_in)?;
            let (z_tokens, cache) = decoder_forward(&weights, &m, None)?;
            let (outs, hcache) = heads_forward(&weights, &z_tokens)?;

            // prior MSE on flattened embeddings
            let ghat = outs.prior.clone().reshaped(&[b, flat])?;
            let l_prior = losses::prior_mse(&ghat, &g_target)?;
            // low-level L1
            let zhat = outs.latent.clone().reshaped(&[b, latent_len])?;
            let l_low = losses::lowlevel_l1(&zhat, &z_target)?;
            // contrastive on row-normalized flat embeddings
            let e_flat = outs.retrieval.clone().reshaped(&[b, flat])?;
            let e_n = ops::l2_normalize_rows(&e_flat);
            let g_n = ops::l2_normalize_rows(&g_b);
            let (l_contr, d_e_n) = if b >= 2 {
                match &mix {
                    Some(mx) => (
                        losses::bimixco_loss(&e_n, &g_n, mx, pc.tau)?.scalar,
                        losses::bimixco_grad(&e_n, &g_n, mx, pc.tau)?,
                    ),
                    None => (
                        losses::softclip_loss(&e_n, &g_n, pc.tau)?.scalar,
                        losses::softclip_grad(&e_n, &g_n, pc.tau)?,
                    ),
                }
            } else {
                (0.0, Tensor::zeros(&[b, flat]))
            };

            let total =
                l_prior.scalar + pc.alpha1 * l_low.scalar + pc.alpha2 * l_contr;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: batch_idx,
                    msg: format!(
                        "prior {} lowlevel {} contrastive {}",
                        l_prior.scalar, l_low.scalar, l_contr
                    ),
                });
            }

            // backward
            let mut grads = weights.zero_grads();
            let d_ghat = losses::prior_mse_grad(&ghat, &g_target)?;
            let mut d_latent = losses::lowlevel_l1_grad(&zhat, &z_target)?;
            for v in d_latent.data_mut() {
                *v *= pc.alpha1;
            }
            let d_latent = d_latent.reshaped(&[b, dims.latent[0], dims.latent[1], dims.latent[2]])?;
            let d_e_n = ops::scale(&d_e_n, pc.alpha2);
            let d_e_flat = ops::l2_normalize_rows_vjp(&e_flat, &e_n, &d_e_n)?;
            let d_e = d_e_flat.reshaped(&[b * dims.tokens, dims.token_dim])?;
            let dzrows = heads_backward(
                &weights,
                &hcache,
                Some(&d_e),
                Some(&d_latent),
                Some(&d_ghat),
                &mut grads,
            )?;
            let _dm = decoder_backward(&weights, &cache, &dzrows, &mut grads)?;

            let lr = one_cycle_lr(pc.lr, global_step, total_steps);
            last_lr = lr;
            apply_decoder_step(&mut opt, &mut weights, &grads, lr);
            global_step += 1;

            sums.0 += l_prior.scalar as f64;
            sums.1 += l_low.scalar as f64;
            sums.2 += l_contr as f64;
            sums.3 += total as f64;
        }
        let nb = batches.len().max(1) as f64;
        log.entries.push(EpochLog {
            epoch,
            phase,
            l_prior: (sums.0 / nb) as f32,
            l_lowlevel: (sums.1 / nb) as f32,
            l_contrastive: (sums.2 / nb) as f32,
            total: (sums.3 / nb) as f32,
            lr: last_lr,
        });
    }

    Ok((weights, ridge, log))
}

/// Fixed parameter ordering shared by the optimizer state and the update
/// step. Returns (shapes, decay mask).
fn decoder_param_shapes(w: &DecoderWeights) -> (Vec<Vec<usize>>, Vec<bool>) {
    let mut shapes = Vec::new();
    let mut decay = Vec::new();
    let mut push = |t: &Tensor, d: bool| {
        shapes.push(t.shape().to_vec());
        decay.push(d);
    };
    push(&w.tokenizer.w, true);
    push(&w.tokenizer.b, false);
    for b in &w.blocks {
        push(&b.lin1.w, true);
        push(&b.lin1.b, false);
        push(&b.lin2.w, true);
        push(&b.lin2.b, false);
        push(&b.gamma, false);
        push(&b.beta, false);
    }
    push(&w.retrieval.w, true);
    push(&w.retrieval.b, false);
    push(&w.low_summary.w, true);
    push(&w.low_summary.b, false);
    push(&w.low_conv1.w, true);
    push(&w.low_conv1.b, false);
    push(&w.low_conv2.w, true);
    push(&w.low_conv2.b, false);
    push(&w.prior_in.w, true);
    push(&w.prior_in.b, false);
    push(&w.prior_hidden.w, true);
    push(&w.prior_hidden.b, false);
    push(&w.prior_out.w, true);
    push(&w.prior_out.b, false);
    (shapes, decay)
}

fn apply_decoder_step(
    opt: &mut AdamW,
    w: &mut DecoderWeights,
    g: &super::model::DecoderGrads,
    lr: f32,
) {
    let (_, decay) = decoder_param_shapes(w);
    let mut pairs: Vec<(&mut Tensor, &Tensor)> = Vec::new();
    pairs.push((&mut w.tokenizer.w, &g.tokenizer.w));
    pairs.push((&mut w.tokenizer.b, &g.tokenizer.b));
    for (b, gb) in w.blocks.iter_mut().zip(g.blocks.iter()) {
        pairs.push((&mut b.lin1.w, &gb.lin1.w));
        pairs.push((&mut b.lin1.b, &gb.lin1.b));
        pairs.push((&mut b.lin2.w, &gb.lin2.w));
        pairs.push((&mut b.lin2.b, &gb.lin2.b));
        pairs.push((&mut b.gamma, &gb.gamma));
        pairs.push((&mut b.beta, &gb.beta));
    }
    pairs.push((&mut w.retrieval.w, &g.retrieval.w));
    pairs.push((&mut w.retrieval.b, &g.retrieval.b));
    pairs.push((&mut w.low_summary.w, &g.low_summary.w));
    pairs.push((&mut w.low_summary.b, &g.low_summary.b));
    pairs.push((&mut w.low_conv1.w, &g.low_conv1.w));
    pairs.push((&mut w.low_conv1.b, &g.low_conv1.b));
    pairs.push((&mut w.low_conv2.w, &g.low_conv2.w));
    pairs.push((&mut w.low_conv2.b, &g.low_conv2.b));
    pairs.push((&mut w.prior_in.w, &g.prior_in.w));
    pairs.push((&mut w.prior_in.b, &g.prior_in.b));
    pairs.push((&mut w.prior_hidden.w, &g.prior_hidden.w));
    pairs.push((&mut w.prior_hidden.b, &g.prior_hidden.b));
    pairs.push((&mut w.prior_out.w, &g.prior_out.w));
    pairs.push((&mut w.prior_out.b, &g.prior_out.b));
    opt.step(&mut pairs, &decay, lr);
}
