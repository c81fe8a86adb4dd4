//! Every scalar training objective: voxel mixing, mixed/soft contrastive
//! losses, prior MSE, low-level L1, and the detection/mask losses. Forward
//! values are generic over the scalar type so the finite-difference harness
//! can drive them at f64; gradients are the hand-derived f32 path.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor, TensorBase};

/// Scalar loss plus a component breakdown (components sum to the scalar).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub scalar: f32,
    pub components: BTreeMap<String, f32>,
}

impl LossValue {
    fn simple(name: &str, v: f32) -> Self {
        let mut components = BTreeMap::new();
        components.insert(name.to_string(), v);
        LossValue {
            scalar: v,
            components,
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.scalar.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                op,
                context: format!("loss components {:?}", self.components),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// voxel mixing
// ---------------------------------------------------------------------------

/// Mixing coefficients and partner permutation for one batch.
#[derive(Debug, Clone)]
pub struct MixBatch {
    pub lambda: Vec<f32>,
    pub partner: Vec<usize>,
}

impl MixBatch {
    /// λ_i ~ Beta(beta, beta), partner = uniform random permutation.
    pub fn sample(batch: usize, beta: f32, rng: &mut impl Rng) -> Self {
        let dist = Beta::new(beta as f64, beta as f64).expect("beta > 0");
        let lambda = (0..batch).map(|_| dist.sample(rng) as f32).collect();
        let mut partner: Vec<usize> = (0..batch).collect();
        use rand::seq::SliceRandom;
        partner.shuffle(rng);
        MixBatch { lambda, partner }
    }

    pub fn identity(batch: usize) -> Self {
        MixBatch {
            lambda: vec![1.0; batch],
            partner: (0..batch).collect(),
        }
    }
}

/// Row-wise convex combination: out_i = λ_i·v_i + (1−λ_i)·v_{j(i)}.
pub fn mixco_mix(v: &Tensor, lambda: &[f32], partner: &[usize]) -> Result<Tensor> {
    let b = v.shape()[0];
    let d = v.cols_2d();
    if lambda.len() != b || partner.len() != b {
        return Err(Error::ShapeMismatch {
            op: "mixco_mix",
            expected: vec![b],
            got: vec![lambda.len(), partner.len()],
        });
    }
    if lambda.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(Error::domain("mixco_mix", "lambda outside [0,1]"));
    }
    let mut out = Tensor::zeros(v.shape());
    for i in 0..b {
        let j = partner[i];
        let l = lambda[i];
        for k in 0..d {
            out.data_mut()[i * d + k] = l * v.data()[i * d + k] + (1.0 - l) * v.data()[j * d + k];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// contrastive losses
// ---------------------------------------------------------------------------

fn check_normalized(t: &Tensor, op: &'static str) -> Result<()> {
    let n = t.cols_2d();
    for (r, row) in t.data().chunks_exact(n).enumerate() {
        let norm: f32 = row.iter().map(|&v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::contract(
                op,
                format!("row {r} has L2 norm {norm:.5}, expected 1 within 1e-3"),
            ));
        }
    }
    Ok(())
}

fn check_tau(tau: f32, op: &'static str) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::domain(op, "temperature must be > 0"));
    }
    Ok(())
}

/// Row-wise log-softmax of an explicit b×b matrix stored in `l`.
fn log_softmax_rows_inplace<T: Scalar>(l: &mut [T], b: usize) {
    for row in l.chunks_exact_mut(b) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::ZERO;
        for &v in row.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

fn similarity_logits<T: Scalar>(z: &TensorBase<T>, g: &TensorBase<T>, tau: f32) -> Result<Vec<T>> {
    let l = ops::matmul_nt(z, g)?;
    let inv_tau = T::from_f32(1.0 / tau);
    Ok(l.data().iter().map(|&v| v * inv_tau).collect())
}

/// Mixed bidirectional contrastive loss value.
///
/// Forward direction: λ-weighted two-target cross-entropy of each mixed row
/// against its own and its partner's teacher; backward direction: the same
/// targets read along columns. Returned value is the mean of the two.
pub fn bimixco_value<T: Scalar>(
    z_mix: &TensorBase<T>,
    g: &TensorBase<T>,
    lambda: &[f32],
    partner: &[usize],
    tau: f32,
) -> Result<T> {
    let b = z_mix.shape()[0];
    let mut logits = similarity_logits(z_mix, g, tau)?;
    let mut logits_t = vec![T::ZERO; b * b];
    for i in 0..b {
        for m in 0..b {
            logits_t[m * b + i] = logits[i * b + m];
        }
    }
    log_softmax_rows_inplace(&mut logits, b);
    log_softmax_rows_inplace(&mut logits_t, b);

    let mut fwd = T::ZERO;
    let mut bwd = T::ZERO;
    for i in 0..b {
        let li = T::from_f32(lambda[i]);
        let lc = T::ONE - li;
        let j = partner[i];
        fwd += li * logits[i * b + i] + lc * logits[i * b + j];
        bwd += li * logits_t[i * b + i] + lc * logits_t[j * b + i];
    }
    let inv_b = T::from_f64(-1.0 / b as f64);
    Ok((fwd + bwd) * inv_b * T::from_f64(0.5))
}

pub fn bimixco_loss(
    z_mix: &Tensor,
    g: &Tensor,
    mix: &MixBatch,
    tau: f32,
) -> Result<LossValue> {
    check_tau(tau, "bimixco_loss")?;
    if z_mix.shape()[0] < 2 {
        return Err(Error::domain("bimixco_loss", "need batch size >= 2"));
    }
    check_normalized(z_mix, "bimixco_loss")?;
    check_normalized(g, "bimixco_loss")?;
    let v = bimixco_value::<f32>(z_mix, g, &mix.lambda, &mix.partner, tau)?;
    Ok(LossValue::simple("bimixco", v))
}

/// Gradient of [`bimixco_value`] with respect to `z_mix`.
pub fn bimixco_grad(
    z_mix: &Tensor,
    g: &Tensor,
    mix: &MixBatch,
    tau: f32,
) -> Result<Tensor> {
    let b = z_mix.shape()[0];
    let logits = similarity_logits::<f32>(z_mix, g, tau)?;
    // row-softmax P and column-softmax Q
    let mut p = logits.clone();
    log_softmax_rows_inplace(&mut p, b);
    for v in p.iter_mut() {
        *v = v.exp();
    }
    let mut q_t = vec![0.0f32; b * b]; // q_t[m][i] = colsoftmax of L at (i,m)
    for i in 0..b {
        for m in 0..b {
            q_t[m * b + i] = logits[i * b + m];
        }
    }
    log_softmax_rows_inplace(&mut q_t, b);
    for v in q_t.iter_mut() {
        *v = v.exp();
    }

    // target matrix T[i][m] and its column sums s_m
    let mut t = vec![0.0f32; b * b];
    for i in 0..b {
        t[i * b + i] += mix.lambda[i];
        t[i * b + mix.partner[i]] += 1.0 - mix.lambda[i];
    }
    let mut col_sum = vec![0.0f32; b];
    for i in 0..b {
        for m in 0..b {
            col_sum[m] += t[i * b + m];
        }
    }

    let inv_b = 1.0 / b as f32;
    let mut dl = vec![0.0f32; b * b];
    for i in 0..b {
        for m in 0..b {
            let fwd = p[i * b + m] - t[i * b + m];
            let bwd = col_sum[m] * q_t[m * b + i] - t[i * b + m];
            dl[i * b + m] = 0.5 * inv_b * (fwd + bwd);
        }
    }
    // L = Z·Gᵀ/τ → dZ = dL·G/τ
    let dl_t = Tensor::from_vec(&[b, b], dl)?;
    let dz = ops::matmul(&dl_t, g)?;
    Ok(ops::scale(&dz, 1.0 / tau))
}

/// Soft-target contrastive value: cross-entropy between softmax(Z·Gᵀ/τ) rows
/// and soft targets softmax(G·Gᵀ/τ), symmetrized over both directions.
pub fn softclip_value<T: Scalar>(z: &TensorBase<T>, g: &TensorBase<T>, tau: f32) -> Result<T> {
    let b = z.shape()[0];
    let mut logits = similarity_logits(z, g, tau)?;
    let mut logits_t = vec![T::ZERO; b * b];
    for i in 0..b {
        for m in 0..b {
            logits_t[m * b + i] = logits[i * b + m];
        }
    }
    let mut targets = similarity_logits(g, g, tau)?;
    log_softmax_rows_inplace(&mut targets, b);
    for v in targets.iter_mut() {
        *v = v.exp();
    }
    log_softmax_rows_inplace(&mut logits, b);
    log_softmax_rows_inplace(&mut logits_t, b);

    let mut acc = T::ZERO;
    for i in 0..b {
        for m in 0..b {
            acc += targets[i * b + m] * (logits[i * b + m] + logits_t[i * b + m]);
        }
    }
    Ok(acc * T::from_f64(-0.5 / b as f64))
}

pub fn softclip_loss(z: &Tensor, g: &Tensor, tau: f32) -> Result<LossValue> {
    check_tau(tau, "softclip_loss")?;
    check_normalized(z, "softclip_loss")?;
    check_normalized(g, "softclip_loss")?;
    let v = softclip_value::<f32>(z, g, tau)?;
    Ok(LossValue::simple("softclip", v))
}

pub fn softclip_grad(z: &Tensor, g: &Tensor, tau: f32) -> Result<Tensor> {
    let b = z.shape()[0];
    let logits = similarity_logits::<f32>(z, g, tau)?;
    let mut p = logits.clone();
    log_softmax_rows_inplace(&mut p, b);
    for v in p.iter_mut() {
        *v = v.exp();
    }
    let mut p2 = vec![0.0f32; b * b];
    for i in 0..b {
        for m in 0..b {
            p2[m * b + i] = logits[i * b + m];
        }
    }
    log_softmax_rows_inplace(&mut p2, b);
    for v in p2.iter_mut() {
        *v = v.exp();
    }
    let mut targets = similarity_logits::<f32>(g, g, tau)?;
    log_softmax_rows_inplace(&mut targets, b);
    for v in targets.iter_mut() {
        *v = v.exp();
    }

    let inv_b = 1.0 / b as f32;
    let mut dl = vec![0.0f32; b * b];
    for i in 0..b {
        for m in 0..b {
            let fwd = p[i * b + m] - targets[i * b + m];
            let bwd = p2[m * b + i] - targets[m * b + i];
            dl[i * b + m] = 0.5 * inv_b * (fwd + bwd);
        }
    }
    let dl_t = Tensor::from_vec(&[b, b], dl)?;
    let dz = ops::matmul(&dl_t, g)?;
    Ok(ops::scale(&dz, 1.0 / tau))
}

// ---------------------------------------------------------------------------
// reconstruction losses
// ---------------------------------------------------------------------------

/// Mean absolute error over every element.
pub fn lowlevel_l1_value<T: Scalar>(pred: &TensorBase<T>, target: &TensorBase<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "lowlevel_l1",
            expected: target.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let mut acc = T::ZERO;
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        acc += (a - b).abs();
    }
    Ok(acc / T::from_f64(pred.len() as f64))
}

pub fn lowlevel_l1(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    Ok(LossValue::simple(
        "lowlevel_l1",
        lowlevel_l1_value::<f32>(pred, target)?,
    ))
}

pub fn lowlevel_l1_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inv = 1.0 / pred.len() as f32;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        *g = if p > t {
            inv
        } else if p < t {
            -inv
        } else {
            0.0
        };
    }
    Ok(grad)
}

/// Mean over the leading (batch) dim of the squared L2 distance per sample.
pub fn prior_mse_value<T: Scalar>(pred: &TensorBase<T>, target: &TensorBase<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "prior_mse",
            expected: target.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let b = pred.shape().first().copied().unwrap_or(1).max(1);
    let mut acc = T::ZERO;
    for (&a, &t) in pred.data().iter().zip(target.data()) {
        let d = a - t;
        acc += d * d;
    }
    Ok(acc / T::from_f64(b as f64))
}

pub fn prior_mse(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    Ok(LossValue::simple(
        "prior_mse",
        prior_mse_value::<f32>(pred, target)?,
    ))
}

/// d/dpred = 2(pred − target)/b.
pub fn prior_mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let b = pred.shape().first().copied().unwrap_or(1).max(1);
    let mut grad = ops::sub(pred, target)?;
    let s = 2.0 / b as f32;
    for v in grad.data_mut() {
        *v *= s;
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// detection + mask losses
// ---------------------------------------------------------------------------

/// Clamp floor for cross-entropy on probabilities.
pub const CE_EPS: f32 = 1e-7;

pub fn smooth_l1<T: Scalar>(r: T) -> T {
    let one = T::ONE;
    let a = r.abs();
    if a < one {
        T::from_f64(0.5) * r * r
    } else {
        a - T::from_f64(0.5)
    }
}

pub fn smooth_l1_deriv(r: f32) -> f32 {
    if r.abs() < 1.0 {
        r
    } else if r > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Classification + gated box regression over R proposals.
///
/// `class_probs` are post-softmax probabilities [R, C+1]; label 0 is
/// background. The regression term only sees foreground proposals and is
/// normalized by max(1, #positives).
pub fn det_loss_value<T: Scalar>(
    class_probs: &TensorBase<T>,
    labels: &[usize],
    box_pred: &TensorBase<T>,
    box_target: &TensorBase<T>,
    lambda_reg: f32,
) -> Result<(T, T)> {
    let r = class_probs.shape().first().copied().unwrap_or(0);
    if r == 0 {
        return Ok((T::ZERO, T::ZERO));
    }
    let c1 = class_probs.cols_2d();
    if labels.len() != r || box_pred.shape() != [r, 4] || box_target.shape() != [r, 4] {
        return Err(Error::ShapeMismatch {
            op: "det_loss",
            expected: vec![r, 4],
            got: box_pred.shape().to_vec(),
        });
    }
    if labels.iter().any(|&l| l >= c1) {
        return Err(Error::domain("det_loss", "label out of range [0, C]"));
    }
    let eps = T::from_f32(CE_EPS);
    let mut ce = T::ZERO;
    for (i, &lab) in labels.iter().enumerate() {
        let p = class_probs.data()[i * c1 + lab].maximum(eps);
        ce -= p.ln();
    }
    ce /= T::from_f64(r as f64);

    let positives = labels.iter().filter(|&&l| l > 0).count().max(1);
    let mut reg = T::ZERO;
    for (i, &lab) in labels.iter().enumerate() {
        if lab == 0 {
            continue;
        }
        for k in 0..4 {
            let d = box_pred.data()[i * 4 + k] - box_target.data()[i * 4 + k];
            reg += smooth_l1(d);
        }
    }
    reg *= T::from_f32(lambda_reg) / T::from_f64(positives as f64);
    Ok((ce, reg))
}

pub fn det_loss(
    class_probs: &Tensor,
    labels: &[usize],
    box_pred: &Tensor,
    box_target: &Tensor,
    lambda_reg: f32,
) -> Result<LossValue> {
    let (ce, reg) = det_loss_value::<f32>(class_probs, labels, box_pred, box_target, lambda_reg)?;
    let mut components = BTreeMap::new();
    components.insert("cls".to_string(), ce);
    components.insert("reg".to_string(), reg);
    Ok(LossValue {
        scalar: ce + reg,
        components,
    })
}

/// Gradients w.r.t. (class_probs, box_pred).
pub fn det_loss_grad(
    class_probs: &Tensor,
    labels: &[usize],
    box_pred: &Tensor,
    box_target: &Tensor,
    lambda_reg: f32,
) -> Result<(Tensor, Tensor)> {
    let r = class_probs.shape().first().copied().unwrap_or(0);
    let c1 = class_probs.cols_2d();
    let mut dprobs = Tensor::zeros(class_probs.shape());
    let mut dbox = Tensor::zeros(box_pred.shape());
    if r == 0 {
        return Ok((dprobs, dbox));
    }
    let inv_r = 1.0 / r as f32;
    for (i, &lab) in labels.iter().enumerate() {
        let p = class_probs.data()[i * c1 + lab];
        if p > CE_EPS {
            dprobs.data_mut()[i * c1 + lab] = -inv_r / p;
        }
    }
    let positives = labels.iter().filter(|&&l| l > 0).count().max(1);
    let s = lambda_reg / positives as f32;
    for (i, &lab) in labels.iter().enumerate() {
        if lab == 0 {
            continue;
        }
        for k in 0..4 {
            let d = box_pred.data()[i * 4 + k] - box_target.data()[i * 4 + k];
            dbox.data_mut()[i * 4 + k] = s * smooth_l1_deriv(d);
        }
    }
    Ok((dprobs, dbox))
}

/// Per-pixel BCE on the ground-truth-class mask channel of positive
/// proposals, averaged over pixels and normalized by max(1, #positives).
/// Predictions must already be probabilities; they are clamped to
/// [CE_EPS, 1−CE_EPS].
pub fn mask_loss_value<T: Scalar>(
    pred: &TensorBase<T>,
    labels: &[usize],
    gt: &TensorBase<T>,
) -> Result<T> {
    let s = pred.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "mask_loss",
            expected: vec![4],
            got: s.to_vec(),
        });
    }
    let (r, c, m) = (s[0], s[1], s[2]);
    if gt.shape() != [r, m, m] || labels.len() != r {
        return Err(Error::ShapeMismatch {
            op: "mask_loss",
            expected: vec![r, m, m],
            got: gt.shape().to_vec(),
        });
    }
    let lo = T::from_f32(CE_EPS);
    let hi = T::ONE - lo;
    let positives = labels.iter().filter(|&&l| l > 0).count();
    if positives == 0 {
        return Ok(T::ZERO);
    }
    let mut acc = T::ZERO;
    for (i, &lab) in labels.iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let ch = lab - 1;
        if ch >= c {
            return Err(Error::domain("mask_loss", "label exceeds mask channels"));
        }
        let base = ((i * c) + ch) * m * m;
        let gt_base = i * m * m;
        let mut per = T::ZERO;
        for px in 0..m * m {
            let p = pred.data()[base + px].maximum(lo).minimum(hi);
            let t = gt.data()[gt_base + px];
            per -= t * p.ln() + (T::ONE - t) * (T::ONE - p).ln();
        }
        acc += per / T::from_f64((m * m) as f64);
    }
    Ok(acc / T::from_f64(positives as f64))
}

pub fn mask_loss(pred: &Tensor, labels: &[usize], gt: &Tensor) -> Result<LossValue> {
    Ok(LossValue::simple(
        "mask_bce",
        mask_loss_value::<f32>(pred, labels, gt)?,
    ))
}

pub fn mask_loss_grad(pred: &Tensor, labels: &[usize], gt: &Tensor) -> Result<Tensor> {
    let s = pred.shape();
    let (_r, c, m) = (s[0], s[1], s[2]);
    let mut grad = Tensor::zeros(s);
    let positives = labels.iter().filter(|&&l| l > 0).count();
    if positives == 0 {
        return Ok(grad);
    }
    let norm = 1.0 / (positives * m * m) as f32;
    for (i, &lab) in labels.iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let ch = lab - 1;
        let base = ((i * c) + ch) * m * m;
        let gt_base = i * m * m;
        for px in 0..m * m {
            let raw = pred.data()[base + px];
            if !(CE_EPS..=1.0 - CE_EPS).contains(&raw) {
                continue; // clamped region is flat
            }
            let t = gt.data()[gt_base + px];
            grad.data_mut()[base + px] = norm * (raw - t) / (raw * (1.0 - raw));
        }
    }
    Ok(grad)
}
