//! Low-rank adapters. The frozen base weight W never changes; the adapter
//! contributes ΔW = B·A with B zero-initialized so the adapted layer starts
//! exactly equal to the base layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// [r, d_in], seeded Gaussian with std 1/sqrt(r).
    pub a: Tensor,
    /// [d_out, r], zero at init.
    pub b: Tensor,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraShape {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::domain(
                "lora_init",
                format!("rank {rank} must be in [1, min({d_in}, {d_out})]"),
            ));
        }
        Ok(LoraAdapter {
            a: Tensor::randn(&[rank, d_in], 1.0 / (rank as f32).sqrt(), rng),
            b: Tensor::zeros(&[d_out, rank]),
            rank,
        })
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// ΔW = B·A, materialized.
    pub fn delta(&self) -> Result<Tensor> {
        ops::matmul(&self.b, &self.a)
    }
}

/// y = x·(W + BA)ᵀ computed as x·Wᵀ + (x·Aᵀ)·Bᵀ. W is borrowed immutably;
/// nothing in this path can write to it.
pub fn lora_forward(x: &Tensor, w_frozen: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let base = ops::matmul_nt(x, w_frozen)?;
    let xa = ops::matmul_nt(x, &adapter.a)?;
    let delta = ops::matmul_nt(&xa, &adapter.b)?;
    ops::add(&base, &delta)
}

/// Gradients of [`lora_forward`]: (dx, dA, dB). The base weight receives no
/// gradient by construction.
pub fn lora_forward_vjp(
    x: &Tensor,
    w_frozen: &Tensor,
    adapter: &LoraAdapter,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    // y = x Wᵀ + x Aᵀ Bᵀ
    let dx_base = ops::matmul(dy, w_frozen)?;
    let dxa = ops::matmul(dy, &adapter.b)?; // [n, r]
    let dx_adapter = ops::matmul(&dxa, &adapter.a)?;
    let dx = ops::add(&dx_base, &dx_adapter)?;
    let xa = ops::matmul_nt(x, &adapter.a)?;
    let db = ops::matmul_tn(dy, &xa)?; // [d_out, r]
    let da = ops::matmul_tn(&dxa, x)?; // [r, d_in]
    Ok((dx, da, db))
}

/// W + BA. Not idempotent: merging twice adds ΔW twice.
pub fn lora_merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    ops::add(w, &adapter.delta()?)
}
