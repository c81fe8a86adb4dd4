//! Shared cross-attention block that injects voxel-decoder tokens into
//! flattened pyramid features, plus the probes used to inspect it.
//!
//! One block instance serves every pyramid level. The temperature is kept
//! positive by parameterizing it as exp(theta), and the output projection is
//! zero-initialized so fusion starts as layer-norm-only.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor, TensorBase};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    /// [d, d_k]
    pub w_q: Tensor,
    /// [d_fmri, d_k]
    pub w_k: Tensor,
    /// [d_fmri, d_k]
    pub w_v: Tensor,
    /// [d_k, d], zero at init.
    pub w_o: Tensor,
    /// Temperature is exp(theta) > 0.
    pub theta: f32,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct CrossAttnGrads {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub theta: f32,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Initial log-temperature. exp(−1.5) ≈ 0.22 starts attention sharp enough
/// that per-position token selection can develop during short fine-tuning;
/// the temperature remains learnable either way.
pub const THETA_INIT: f32 = -1.5;

impl CrossAttnBlock {
    pub fn init(d: usize, d_k: usize, d_fmri: usize, rng: &mut impl Rng) -> Self {
        CrossAttnBlock {
            w_q: Tensor::randn(&[d, d_k], 1.0 / (d as f32).sqrt(), rng),
            w_k: Tensor::randn(&[d_fmri, d_k], 1.0 / (d_fmri as f32).sqrt(), rng),
            w_v: Tensor::randn(&[d_fmri, d_k], 1.0 / (d_fmri as f32).sqrt(), rng),
            w_o: Tensor::zeros(&[d_k, d]),
            theta: THETA_INIT,
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn temperature(&self) -> f32 {
        self.theta.exp()
    }

    pub fn zero_grads(&self) -> CrossAttnGrads {
        CrossAttnGrads {
            w_q: Tensor::zeros(self.w_q.shape()),
            w_k: Tensor::zeros(self.w_k.shape()),
            w_v: Tensor::zeros(self.w_v.shape()),
            w_o: Tensor::zeros(self.w_o.shape()),
            theta: 0.0,
            gamma: Tensor::zeros(self.gamma.shape()),
            beta: Tensor::zeros(self.beta.shape()),
        }
    }
}

/// Pure forward shared by the f32 path and the f64 gradient-check oracle.
/// Returns (fused, attention).
#[allow(clippy::too_many_arguments)]
pub fn fuse_level_fwd<T: Scalar>(
    f: &TensorBase<T>,
    z: &TensorBase<T>,
    w_q: &TensorBase<T>,
    w_k: &TensorBase<T>,
    w_v: &TensorBase<T>,
    w_o: &TensorBase<T>,
    theta: T,
    gamma: &TensorBase<T>,
    beta: &TensorBase<T>,
) -> Result<(TensorBase<T>, TensorBase<T>)> {
    let d_k = w_q.shape()[1];
    let q = ops::matmul(f, w_q)?;
    let k = ops::matmul(z, w_k)?;
    let v = ops::matmul(z, w_v)?;
    let scale = theta.exp() * T::from_f64((d_k as f64).sqrt());
    let scores = ops::matmul_nt(&q, &k)?;
    let attn = ops::softmax_rows(&scores, scale)?;
    let o = ops::matmul(&attn, &v)?;
    let h = ops::add(f, &ops::matmul(&o, w_o)?)?;
    let fused = ops::layer_norm(&h, gamma, beta, T::from_f32(LN_EPS))?;
    Ok((fused, attn))
}

/// Intermediates needed by the backward pass.
pub struct FuseCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scores: Tensor,
    attn: Tensor,
    o: Tensor,
    h: Tensor,
}

pub fn fuse_level(
    f: &Tensor,
    z: &Tensor,
    block: &CrossAttnBlock,
) -> Result<(Tensor, Tensor, FuseCache)> {
    let d_k = block.w_q.shape()[1];
    let q = ops::matmul(f, &block.w_q)?;
    let k = ops::matmul(z, &block.w_k)?;
    let v = ops::matmul(z, &block.w_v)?;
    let scale = block.temperature() * (d_k as f32).sqrt();
    let scores = ops::matmul_nt(&q, &k)?;
    let attn = ops::softmax_rows(&scores, scale)?;
    let o = ops::matmul(&attn, &v)?;
    let h = ops::add(f, &ops::matmul(&o, &block.w_o)?)?;
    let fused = ops::layer_norm(&h, &block.gamma, &block.beta, LN_EPS)?;
    let cache = FuseCache {
        q,
        k,
        v,
        scores,
        attn: attn.clone(),
        o,
        h,
    };
    Ok((fused, attn, cache))
}

/// Backward of [`fuse_level`]. Returns (dF, dZ) and accumulates parameter
/// gradients into `grads`.
pub fn fuse_level_vjp(
    f: &Tensor,
    z: &Tensor,
    block: &CrossAttnBlock,
    cache: &FuseCache,
    d_fused: &Tensor,
    grads: &mut CrossAttnGrads,
) -> Result<(Tensor, Tensor)> {
    let d_k = block.w_q.shape()[1];
    let scale = block.temperature() * (d_k as f32).sqrt();

    let (dh, dgamma, dbeta) = ops::layer_norm_vjp(&cache.h, &block.gamma, LN_EPS, d_fused)?;
    ops::axpy(&mut grads.gamma, 1.0, &dgamma)?;
    ops::axpy(&mut grads.beta, 1.0, &dbeta)?;

    // h = f + o·W_o
    let mut df = dh.clone();
    let (do_, dw_o) = ops::matmul_vjp(&cache.o, &block.w_o, &dh)?;
    ops::axpy(&mut grads.w_o, 1.0, &dw_o)?;

    // o = attn·v
    let (dattn, dv) = ops::matmul_vjp(&cache.attn, &cache.v, &do_)?;

    // attn = softmax(scores / scale)
    let dscores = ops::softmax_rows_vjp(&cache.attn, &dattn, scale)?;
    // scale = exp(theta)·sqrt(d_k) → dθ = −Σ dscores ⊙ scores
    let mut dtheta = 0.0f32;
    for (&ds, &s) in dscores.data().iter().zip(cache.scores.data()) {
        dtheta -= ds * s;
    }
    grads.theta += dtheta;

    // scores = q·kᵀ
    let dq = ops::matmul(&dscores, &cache.k)?;
    let dk = ops::matmul_tn(&dscores, &cache.q)?;

    // q = f·W_q
    let (df_q, dw_q) = ops::matmul_vjp(f, &block.w_q, &dq)?;
    ops::axpy(&mut grads.w_q, 1.0, &dw_q)?;
    ops::axpy(&mut df, 1.0, &df_q)?;

    // k = z·W_k, v = z·W_v
    let (dz_k, dw_k) = ops::matmul_vjp(z, &block.w_k, &dk)?;
    let (dz_v, dw_v) = ops::matmul_vjp(z, &block.w_v, &dv)?;
    ops::axpy(&mut grads.w_k, 1.0, &dw_k)?;
    ops::axpy(&mut grads.w_v, 1.0, &dw_v)?;
    let dz = ops::add(&dz_k, &dz_v)?;

    Ok((df, dz))
}

// ---------------------------------------------------------------------------
// probes
// ---------------------------------------------------------------------------

/// Attention captured at one pyramid level for one image.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub image_id: usize,
    pub level: usize,
    /// [N_l, M] row-stochastic attention.
    pub attn: Tensor,
}

/// Per-token score vector s (sums to 1) for one level.
pub fn attention_token_summary(attn: &Tensor) -> Vec<f32> {
    let m = attn.cols_2d();
    let rows = attn.rows_2d();
    let mut s = vec![0.0f32; m];
    for row in attn.data().chunks_exact(m) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in s.iter_mut() {
        *v /= rows as f32;
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionSummary {
    pub image_id: usize,
    /// Per-level token scores.
    pub per_level: Vec<Vec<f32>>,
    /// Mean over levels.
    pub multi_layer: Vec<f32>,
}

/// Aggregate the probes of one forward pass into per-level and multi-layer
/// token scores.
pub fn attention_summary(probes: &[AttentionProbe]) -> Result<AttentionSummary> {
    if probes.is_empty() {
        return Err(Error::domain("attention_summary", "empty probe set"));
    }
    let image_id = probes[0].image_id;
    let m = probes[0].attn.cols_2d();
    let mut per_level = Vec::with_capacity(probes.len());
    let mut multi = vec![0.0f32; m];
    for p in probes {
        if p.image_id != image_id || p.attn.cols_2d() != m {
            return Err(Error::contract(
                "attention_summary",
                "probes must come from a single forward pass",
            ));
        }
        let s = attention_token_summary(&p.attn);
        for (acc, &v) in multi.iter_mut().zip(&s) {
            *acc += v;
        }
        per_level.push(s);
    }
    for v in multi.iter_mut() {
        *v /= probes.len() as f32;
    }
    Ok(AttentionSummary {
        image_id,
        per_level,
        multi_layer: multi,
    })
}

/// Channel-mean difference maps between fused and raw features, reshaped to
/// the level's spatial grid. Returns (signed, absolute), each h×w.
pub fn feature_diff(
    f: &Tensor,
    fused: &Tensor,
    h: usize,
    w: usize,
) -> Result<(Tensor, Tensor)> {
    if f.shape() != fused.shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_diff",
            expected: f.shape().to_vec(),
            got: fused.shape().to_vec(),
        });
    }
    let n = f.rows_2d();
    let d = f.cols_2d();
    if n != h * w {
        return Err(Error::ShapeMismatch {
            op: "feature_diff",
            expected: vec![h * w, d],
            got: f.shape().to_vec(),
        });
    }
    let mut signed = Tensor::zeros(&[h, w]);
    let mut absolute = Tensor::zeros(&[h, w]);
    for i in 0..n {
        let mut s = 0.0f32;
        let mut a = 0.0f32;
        for c in 0..d {
            let diff = fused.data()[i * d + c] - f.data()[i * d + c];
            s += diff;
            a += diff.abs();
        }
        signed.data_mut()[i] = s / d as f32;
        absolute.data_mut()[i] = a / d as f32;
    }
    Ok((signed, absolute))
}

/// Probe record written by the CLI: token scores plus an optional spatial
/// grid, one record per level.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRecord {
    pub image_id: usize,
    pub level: i64,
    pub s: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<ProbeGrid>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeGrid {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}
