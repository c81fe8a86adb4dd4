//! Closed-form ridge map from raw voxels to the decoder input space:
//! W = (VᵀV + λI)⁻¹ Vᵀ M, solved by Cholesky factorization with f64
//! accumulation.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve};
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone)]
pub struct RidgeMap {
    /// [d_v, d_0]
    pub weights: Tensor,
    pub lambda: f32,
}

pub fn ridge_fit(v: &Tensor, m_target: &Tensor, lambda: f32) -> Result<RidgeMap> {
    if lambda < 0.0 {
        return Err(Error::domain("ridge_fit", "lambda must be >= 0"));
    }
    let n = v.shape()[0];
    if n == 0 || m_target.shape()[0] != n {
        return Err(Error::DimensionMismatch {
            op: "ridge_fit",
            lhs: v.shape().to_vec(),
            rhs: m_target.shape().to_vec(),
        });
    }
    let d_v = v.shape()[1];
    let d_0 = m_target.shape()[1];

    // gram = VᵀV + λI, accumulated in f64
    let mut gram = vec![0.0f64; d_v * d_v];
    for r in 0..n {
        let row = &v.data()[r * d_v..(r + 1) * d_v];
        for i in 0..d_v {
            let vi = row[i] as f64;
            if vi == 0.0 {
                continue;
            }
            let dst = &mut gram[i * d_v..(i + 1) * d_v];
            for (g, &vj) in dst.iter_mut().zip(row.iter()) {
                *g += vi * vj as f64;
            }
        }
    }
    for i in 0..d_v {
        gram[i * d_v + i] += lambda as f64;
    }

    // rhs = Vᵀ M
    let mut rhs = vec![0.0f64; d_v * d_0];
    for r in 0..n {
        let vrow = &v.data()[r * d_v..(r + 1) * d_v];
        let mrow = &m_target.data()[r * d_0..(r + 1) * d_0];
        for (i, &vi) in vrow.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let dst = &mut rhs[i * d_0..(i + 1) * d_0];
            for (o, &mv) in dst.iter_mut().zip(mrow.iter()) {
                *o += vi as f64 * mv as f64;
            }
        }
    }

    cholesky(&mut gram, d_v).map_err(|_| Error::Numerical {
        op: "ridge_fit",
        msg: if lambda == 0.0 {
            "VᵀV is singular; refit with lambda > 0".to_string()
        } else {
            "system not positive definite despite regularization".to_string()
        },
    })?;
    cholesky_solve(&gram, d_v, &mut rhs, d_0);

    let weights = Tensor::from_vec(&[d_v, d_0], rhs.iter().map(|&x| x as f32).collect())?;
    weights.ensure_finite("ridge_fit", "solved weights")?;
    Ok(RidgeMap { weights, lambda })
}

impl RidgeMap {
    /// M = V·W for a batch of voxel rows.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        ops::matmul(v, &self.weights)
    }
}
