//! Forward kernels and their vector-Jacobian products.
//!
//! Forward functions are generic over [`Scalar`] so the gradient-check
//! oracle can evaluate them in f64; backward functions are f32 because they
//! are the hand-derived production path being verified.

use super::{Scalar, Tensor, TensorBase};
use crate::error::{Error, Result};

#[inline]
fn check_2d<T: Scalar>(t: &TensorBase<T>, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![2],
            got: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] · B[k,n].
pub fn matmul<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (m, k) = check_2d(a, "matmul")?;
    let (kb, n) = check_2d(b, "matmul")?;
    if k != kb {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = TensorBase::<T>::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut od[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ.
pub fn matmul_nt<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (m, k) = check_2d(a, "matmul_nt")?;
    let (n, kb) = check_2d(b, "matmul_nt")?;
    if k != kb {
        return Err(Error::DimensionMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = TensorBase::<T>::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            od[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
pub fn matmul_tn<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (m, k) = check_2d(a, "matmul_tn")?;
    let (mb, n) = check_2d(b, "matmul_tn")?;
    if m != mb {
        return Err(Error::DimensionMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = TensorBase::<T>::zeros(&[k, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let brow = &bd[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut od[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// dA = dC·Bᵀ, dB = Aᵀ·dC.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul_nt(dc, b)?;
    let db = matmul_tn(a, dc)?;
    Ok((da, db))
}

pub fn transpose2d<T: Scalar>(a: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (m, n) = check_2d(a, "transpose")?;
    let mut out = TensorBase::<T>::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            let v = a.data()[i * n + j];
            out.data_mut()[j * m + i] = v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

fn zip_check<T: Scalar>(
    a: &TensorBase<T>,
    b: &TensorBase<T>,
    op: &'static str,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    zip_check(a, b, "add")?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

pub fn sub<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    zip_check(a, b, "sub")?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o -= bv;
    }
    Ok(out)
}

pub fn scale<T: Scalar>(a: &TensorBase<T>, s: T) -> TensorBase<T> {
    let mut out = a.clone();
    for o in out.data_mut() {
        *o *= s;
    }
    out
}

/// In-place `a += s · b`, the accumulation primitive of the training loops.
pub fn axpy(a: &mut Tensor, s: f32, b: &Tensor) -> Result<()> {
    zip_check(a, b, "axpy")?;
    for (o, &bv) in a.data_mut().iter_mut().zip(b.data()) {
        *o += s * bv;
    }
    Ok(())
}

/// y = x + b broadcast over rows. The single documented broadcast in the crate.
pub fn add_bias_rows<T: Scalar>(x: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let n = x.cols_2d();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            op: "add_bias_rows",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let bd = b.data();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (o, &bv) in row.iter_mut().zip(bd) {
            *o += bv;
        }
    }
    Ok(out)
}

/// db = column sums of dy (dx is dy unchanged).
pub fn bias_rows_vjp(dy: &Tensor) -> Tensor {
    let n = dy.cols_2d();
    let mut db = Tensor::zeros(&[n]);
    for row in dy.data().chunks_exact(n) {
        for (o, &v) in db.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    db
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

/// Smooth GELU (tanh form).
pub fn gelu<T: Scalar>(x: &TensorBase<T>) -> TensorBase<T> {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let mut out = x.clone();
    for v in out.data_mut() {
        let u = c * (*v + a * *v * *v * *v);
        *v = half * *v * (T::ONE + u.tanh());
    }
    out
}

pub fn gelu_vjp(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_check(x, dy, "gelu_vjp")?;
    let c = 0.797_884_56_f32;
    let a = 0.044_715_f32;
    let mut dx = dy.clone();
    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        let u = c * (xv + a * xv * xv * xv);
        let t = u.tanh();
        let deriv = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * c * (1.0 + 3.0 * a * xv * xv);
        *g *= deriv;
    }
    Ok(dx)
}

pub fn relu<T: Scalar>(x: &TensorBase<T>) -> TensorBase<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.maximum(T::ZERO);
    }
    out
}

pub fn relu_vjp(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_check(x, dy, "relu_vjp")?;
    let mut dx = dy.clone();
    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(dx)
}

pub fn sigmoid<T: Scalar>(x: &TensorBase<T>) -> TensorBase<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = T::ONE / (T::ONE + (-*v).exp());
    }
    out
}

pub fn sigmoid_vjp(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_check(y, dy, "sigmoid_vjp")?;
    let mut dx = dy.clone();
    for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *g *= yv * (1.0 - yv);
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// softmax over rows
// ---------------------------------------------------------------------------

/// Row-wise softmax of x/scale, computed with row-max subtraction.
pub fn softmax_rows<T: Scalar>(x: &TensorBase<T>, scale: T) -> Result<TensorBase<T>> {
    if scale <= T::ZERO {
        return Err(Error::domain("softmax_rows", "scale must be > 0"));
    }
    let n = x.cols_2d();
    if n == 0 {
        return Err(Error::domain("softmax_rows", "empty rows"));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let mut mx = row[0] / scale;
        for v in row.iter() {
            let s = *v / scale;
            if s > mx {
                mx = s;
            }
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v / scale - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// dx = (1/scale) · p ⊙ (dy − ⟨p, dy⟩) per row, where p is the softmax output.
pub fn softmax_rows_vjp(p: &Tensor, dy: &Tensor, scale: f32) -> Result<Tensor> {
    zip_check(p, dy, "softmax_rows_vjp")?;
    let n = p.cols_2d();
    let mut dx = Tensor::zeros(p.shape());
    for ((drow, prow), dyrow) in dx
        .data_mut()
        .chunks_exact_mut(n)
        .zip(p.data().chunks_exact(n))
        .zip(dy.data().chunks_exact(n))
    {
        let dot: f32 = prow.iter().zip(dyrow).map(|(&pv, &dv)| pv * dv).sum();
        for ((g, &pv), &dv) in drow.iter_mut().zip(prow).zip(dyrow) {
            *g = pv * (dv - dot) / scale;
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// layer norm over rows
// ---------------------------------------------------------------------------

/// Per-row standardization followed by affine: y = γ·(x−μ)/√(σ²+eps) + β.
pub fn layer_norm<T: Scalar>(
    x: &TensorBase<T>,
    gamma: &TensorBase<T>,
    beta: &TensorBase<T>,
    eps: T,
) -> Result<TensorBase<T>> {
    if eps <= T::ZERO {
        return Err(Error::domain("layer_norm", "eps must be > 0"));
    }
    let n = x.cols_2d();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::DimensionMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let mut mean = T::ZERO;
        for v in row.iter() {
            mean += *v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for v in row.iter() {
            let d = *v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.data().iter().zip(beta.data())) {
            *v = g * ((*v - mean) * inv_std) + b;
        }
    }
    Ok(out)
}

/// Analytic backward for layer_norm. Returns (dx, dgamma, dbeta).
pub fn layer_norm_vjp(
    x: &Tensor,
    gamma: &Tensor,
    eps: f32,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    zip_check(x, dy, "layer_norm_vjp")?;
    let n = x.cols_2d();
    let inv_n = 1.0 / n as f32;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[n]);
    let mut dbeta = Tensor::zeros(&[n]);
    let mut xhat = vec![0.0f32; n];
    for (xrow, (dyrow, dxrow)) in x.data().chunks_exact(n).zip(
        dy.data()
            .chunks_exact(n)
            .zip(dx.data_mut().chunks_exact_mut(n)),
    ) {
        let mean: f32 = xrow.iter().sum::<f32>() * inv_n;
        let var: f32 = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() * inv_n;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (h, &v) in xhat.iter_mut().zip(xrow) {
            *h = (v - mean) * inv_std;
        }
        // g = dy ⊙ γ; dx = inv_std · (g − mean(g) − x̂ · mean(g ⊙ x̂))
        let mut g_mean = 0.0f32;
        let mut gx_mean = 0.0f32;
        for ((&dv, &gm), &h) in dyrow.iter().zip(gamma.data()).zip(&xhat) {
            let g = dv * gm;
            g_mean += g;
            gx_mean += g * h;
        }
        g_mean *= inv_n;
        gx_mean *= inv_n;
        for (i, (dxv, &dv)) in dxrow.iter_mut().zip(dyrow).enumerate() {
            let g = dv * gamma.data()[i];
            *dxv = inv_std * (g - g_mean - xhat[i] * gx_mean);
            dgamma.data_mut()[i] += dv * xhat[i];
            dbeta.data_mut()[i] += dv;
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// row L2 normalization
// ---------------------------------------------------------------------------

const NORM_FLOOR: f64 = 1e-12;

/// y_i = x_i / max(‖x_i‖₂, 1e-12) per row.
pub fn l2_normalize_rows<T: Scalar>(x: &TensorBase<T>) -> TensorBase<T> {
    let n = x.cols_2d();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let mut sq = T::ZERO;
        for v in row.iter() {
            sq += *v * *v;
        }
        let norm = sq.sqrt().maximum(T::from_f64(NORM_FLOOR));
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// dx = (dy − y·⟨y, dy⟩)/‖x‖ per row.
pub fn l2_normalize_rows_vjp(x: &Tensor, y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_check(x, dy, "l2_normalize_rows_vjp")?;
    let n = x.cols_2d();
    let mut dx = Tensor::zeros(x.shape());
    for ((xrow, yrow), (dyrow, dxrow)) in x
        .data()
        .chunks_exact(n)
        .zip(y.data().chunks_exact(n))
        .zip(
            dy.data()
                .chunks_exact(n)
                .zip(dx.data_mut().chunks_exact_mut(n)),
        )
    {
        let norm = xrow
            .iter()
            .map(|&v| v * v)
            .sum::<f32>()
            .sqrt()
            .max(NORM_FLOOR as f32);
        let dot: f32 = yrow.iter().zip(dyrow).map(|(&a, &b)| a * b).sum();
        for ((g, &yv), &dv) in dxrow.iter_mut().zip(yrow).zip(dyrow) {
            *g = (dv - yv * dot) / norm;
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// conv2d (single image, [C,H,W])
// ---------------------------------------------------------------------------

/// Valid kernel-tap range along one axis: taps v with
/// 0 <= pos·stride + v − pad < extent. Output positions guarantee
/// pos·stride <= extent + pad, so the subtraction cannot underflow.
#[inline]
fn tap_range(pos: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = pos * stride;
    let lo = pad.saturating_sub(base);
    let hi = k.min(extent + pad - base);
    (lo, hi)
}

/// Direct convolution of x[Cin,H,W] with w[Cout,Cin,kh,kw] and bias b[Cout].
pub fn conv2d<T: Scalar>(
    x: &TensorBase<T>,
    w: &TensorBase<T>,
    b: &TensorBase<T>,
    stride: usize,
    pad: usize,
) -> Result<TensorBase<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
        return Err(Error::DimensionMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if b.len() != cout {
        return Err(Error::DimensionMismatch {
            op: "conv2d",
            lhs: ws.to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::domain("conv2d", "kernel larger than padded input"));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = TensorBase::<T>::zeros(&[cout, ho, wo]);
    let xd = x.data();
    let wdt = w.data();
    let od = out.data_mut();

    // 1x1 convolution is a channel mix: saxpy over rows
    if kh == 1 && kw == 1 && pad == 0 && stride == 1 {
        let hw = h * wd;
        for o in 0..cout {
            let orow = &mut od[o * hw..(o + 1) * hw];
            for v in orow.iter_mut() {
                *v = b.data()[o];
            }
            for i in 0..cin {
                let wv = wdt[o * cin + i];
                let xrow = &xd[i * hw..(i + 1) * hw];
                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                    *ov += wv * xv;
                }
            }
        }
        return Ok(out);
    }

    for o in 0..cout {
        let bias = b.data()[o];
        for y0 in 0..ho {
            let (u_lo, u_hi) = tap_range(y0, stride, pad, kh, h);
            for x0 in 0..wo {
                let (v_lo, v_hi) = tap_range(x0, stride, pad, kw, wd);
                let nv = v_hi - v_lo;
                let mut acc = bias;
                for i in 0..cin {
                    for u in u_lo..u_hi {
                        let yy = y0 * stride + u - pad;
                        let xbase = (i * h + yy) * wd + (x0 * stride + v_lo - pad);
                        let wbase = ((o * cin + i) * kh + u) * kw + v_lo;
                        let xrow = &xd[xbase..xbase + nv];
                        let wrow = &wdt[wbase..wbase + nv];
                        for (&xv, &wv) in xrow.iter().zip(wrow) {
                            acc += xv * wv;
                        }
                    }
                }
                od[(o * ho + y0) * wo + x0] = acc;
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dw, db) for conv2d.
pub fn conv2d_vjp(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    if dy.shape() != [cout, ho, wo] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_vjp",
            expected: vec![cout, ho, wo],
            got: dy.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(&[cout]);
    let xd = x.data();
    let wdt = w.data();
    let dyd = dy.data();

    if kh == 1 && kw == 1 && pad == 0 && stride == 1 {
        let hw = h * wd;
        for o in 0..cout {
            let gy = &dyd[o * hw..(o + 1) * hw];
            db.data_mut()[o] += gy.iter().sum::<f32>();
            for i in 0..cin {
                let wv = wdt[o * cin + i];
                let xrow = &xd[i * hw..(i + 1) * hw];
                let dxrow = &mut dx.data_mut()[i * hw..(i + 1) * hw];
                let mut dw_acc = 0.0f32;
                for ((dxv, &xv), &gv) in dxrow.iter_mut().zip(xrow).zip(gy) {
                    dw_acc += gv * xv;
                    *dxv += gv * wv;
                }
                dw.data_mut()[o * cin + i] += dw_acc;
            }
        }
        return Ok((dx, dw, db));
    }

    for o in 0..cout {
        for y0 in 0..ho {
            let (u_lo, u_hi) = tap_range(y0, stride, pad, kh, h);
            for x0 in 0..wo {
                let g = dyd[(o * ho + y0) * wo + x0];
                if g == 0.0 {
                    continue;
                }
                db.data_mut()[o] += g;
                let (v_lo, v_hi) = tap_range(x0, stride, pad, kw, wd);
                let nv = v_hi - v_lo;
                for i in 0..cin {
                    for u in u_lo..u_hi {
                        let yy = y0 * stride + u - pad;
                        let xbase = (i * h + yy) * wd + (x0 * stride + v_lo - pad);
                        let wbase = ((o * cin + i) * kh + u) * kw + v_lo;
                        let xrow = &xd[xbase..xbase + nv];
                        let dwrow = &mut dw.data_mut()[wbase..wbase + nv];
                        for (dwv, &xv) in dwrow.iter_mut().zip(xrow) {
                            *dwv += g * xv;
                        }
                        let wrow = &wdt[wbase..wbase + nv];
                        let dxrow = &mut dx.data_mut()[xbase..xbase + nv];
                        for (dxv, &wv) in dxrow.iter_mut().zip(wrow) {
                            *dxv += g * wv;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

pub fn upsample_nearest2x<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "upsample_nearest2x",
            expected: vec![3],
            got: xs.to_vec(),
        });
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let mut out = TensorBase::<T>::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                let v = x.data()[(ch * h + i / 2) * w + j / 2];
                out.data_mut()[(ch * 2 * h + i) * 2 * w + j] = v;
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_vjp(x_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    if dy.shape() != [c, 2 * h, 2 * w] {
        return Err(Error::ShapeMismatch {
            op: "upsample_nearest2x_vjp",
            expected: vec![c, 2 * h, 2 * w],
            got: dy.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(x_shape);
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dx.data_mut()[(ch * h + i / 2) * w + j / 2] +=
                    dy.data()[(ch * 2 * h + i) * 2 * w + j];
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(x: &TensorBase<T>) -> T {
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    acc
}

pub fn mean_all<T: Scalar>(x: &TensorBase<T>) -> T {
    sum_all(x) / T::from_f64(x.len() as f64)
}

/// Mean over token rows: x[R,n] → y[n].
pub fn mean_rows<T: Scalar>(x: &TensorBase<T>) -> TensorBase<T> {
    let n = x.cols_2d();
    let r = x.rows_2d();
    let mut out = TensorBase::<T>::zeros(&[n]);
    for row in x.data().chunks_exact(n) {
        for (o, &v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = T::ONE / T::from_f64(r as f64);
    for o in out.data_mut() {
        *o *= inv;
    }
    out
}

/// VJP of mean_rows: spread dy/R over every row.
pub fn mean_rows_vjp(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let n = *x_shape.last().unwrap();
    let r: usize = x_shape[..x_shape.len() - 1].iter().product();
    let inv = 1.0 / r as f32;
    let mut dx = Tensor::zeros(x_shape);
    for row in dx.data_mut().chunks_exact_mut(n) {
        for (o, &v) in row.iter_mut().zip(dy.data()) {
            *o = v * inv;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_identity_leaves_matrix_unchanged() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let id = Tensor::eye(3);
        let c = matmul(&a, &id).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn matmul_zero_gives_zero() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        let c = matmul(&a, &z).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = Tensor::full(&[2, 4], 3.7);
        let y = softmax_rows(&x, 1.0).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::rng_from(7, 0);
        let x = Tensor::randn(&[5, 9], 3.0, &mut rng);
        let y = softmax_rows(&x, 0.5).unwrap();
        for row in y.data().chunks_exact(9) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_analytic_pair() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 3.0f32.ln()]).unwrap();
        let y = softmax_rows(&x, 1.0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-6);
        assert!((y.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nonpositive_scale() {
        let x = Tensor::zeros(&[1, 2]);
        assert!(softmax_rows(&x, 0.0).is_err());
        assert!(softmax_rows(&x, -1.0).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero_then_beta() {
        let x = Tensor::full(&[1, 5], 2.0);
        let gamma = Tensor::full(&[5], 1.0);
        let beta = Tensor::zeros(&[5]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6);
        }
        let beta2 = Tensor::full(&[5], 0.3);
        let gamma0 = Tensor::zeros(&[5]);
        let y2 = layer_norm(&x, &gamma0, &beta2, 1e-5).unwrap();
        for &v in y2.data() {
            assert!((v - 0.3).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = crate::rng::rng_from(3, 0);
        let x = Tensor::randn(&[4, 16], 2.0, &mut rng);
        let gamma = Tensor::full(&[16], 1.0);
        let beta = Tensor::zeros(&[16]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for row in y.data().chunks_exact(16) {
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = crate::rng::rng_from(11, 0);
        let a = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[6, 6], 1.0, &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        assert_eq!(
            softmax_rows(&a, 0.7).unwrap(),
            softmax_rows(&a, 0.7).unwrap()
        );
        assert_eq!(gelu(&a), gelu(&a));
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let mut rng = crate::rng::rng_from(5, 0);
        let x = Tensor::randn(&[3, 8], 4.0, &mut rng);
        let y = l2_normalize_rows(&x);
        for row in y.data().chunks_exact(8) {
            let n: f32 = row.iter().map(|&v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn upsample_then_vjp_shapes() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[5], 1.0);
        let dy = Tensor::full(&[1, 4, 4], 1.0);
        let dx = upsample_nearest2x_vjp(&[1, 2, 2], &dy).unwrap();
        assert!(dx.data().iter().all(|&v| (v - 4.0).abs() < 1e-6));
    }
}
