//! Finite-difference verification of hand-derived backward passes.
//!
//! The numeric side perturbs each input coordinate and re-runs the generic
//! forward kernel at f64 (central differences); the analytic side is the f32
//! production VJP. Agreement is measured as
//! `|g_a − g_n| / max(1, |g_a|, |g_n|)` and the maximum over all coordinates
//! must stay under the tolerance.

use rand::Rng;
use serde::Serialize;

use super::{Tensor, Tensor64};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, rng_from};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub probe_shapes: Vec<Vec<usize>>,
}

/// Check the VJP of an operation at `inputs`.
///
/// `forward64` must be the same computation as the production forward, run at
/// f64; `vjp` is the analytic backward under test. The cotangent is a fixed
/// random vector derived from the op name, so runs are reproducible.
pub fn grad_check(
    name: &str,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    forward64: impl Fn(&[Tensor64]) -> Result<Tensor64>,
    vjp: impl Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
) -> Result<GradCheckReport> {
    for (k, t) in inputs.iter().enumerate() {
        if !t.all_finite() {
            return Err(Error::NonFinite {
                op: "grad_check",
                context: format!("{name}: input {k} not finite"),
            });
        }
    }
    let inputs64: Vec<Tensor64> = inputs.iter().map(|t| t.to_f64()).collect();
    let y0 = forward64(&inputs64)?;
    if !y0.all_finite() {
        return Err(Error::NonFinite {
            op: "grad_check",
            context: format!("{name}: forward output not finite"),
        });
    }

    let mut ct_rng = rng_from(0x636f_7461_6e67, fnv1a(name.as_bytes()));
    let cotangent = Tensor::from_fn(y0.shape(), |_| ct_rng.random_range(-1.0f32..1.0));
    let ct64 = cotangent.to_f64();

    let analytic = vjp(inputs, &cotangent)?;
    if analytic.len() != inputs.len() {
        return Err(Error::contract(
            "grad_check",
            format!(
                "{name}: vjp returned {} gradients for {} inputs",
                analytic.len(),
                inputs.len()
            ),
        ));
    }

    let phi = |pt: &[Tensor64]| -> Result<f64> {
        let y = forward64(pt)?;
        if y.shape() != y0.shape() {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                expected: y0.shape().to_vec(),
                got: y.shape().to_vec(),
            });
        }
        Ok(y
            .data()
            .iter()
            .zip(ct64.data())
            .map(|(&yv, &uv)| yv * uv)
            .sum())
    };

    let mut max_rel = 0.0f64;
    let mut point: Vec<Tensor64> = inputs64.clone();
    for k in 0..inputs.len() {
        if analytic[k].shape() != inputs[k].shape() {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                expected: inputs[k].shape().to_vec(),
                got: analytic[k].shape().to_vec(),
            });
        }
        for i in 0..inputs[k].len() {
            let orig = point[k].data()[i];
            point[k].data_mut()[i] = orig + h;
            let plus = phi(&point)?;
            point[k].data_mut()[i] = orig - h;
            let minus = phi(&point)?;
            point[k].data_mut()[i] = orig;

            let g_n = (plus - minus) / (2.0 * h);
            let g_a = analytic[k].data()[i] as f64;
            if !g_n.is_finite() || !g_a.is_finite() {
                return Err(Error::NonFinite {
                    op: "grad_check",
                    context: format!("{name}: gradient at input {k} coord {i}"),
                });
            }
            let rel = (g_a - g_n).abs() / 1.0f64.max(g_a.abs()).max(g_n.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }

    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_err: max_rel,
        tolerance: tol,
        pass: max_rel <= tol,
        probe_shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    })
}

/// Like [`grad_check`] but first asserts the probe point respects the op's
/// documented exclusion zones (e.g. 10·h around a ReLU zero or smooth-L1
/// kink). Rejected points are a contract error so callers resample instead of
/// silently checking a non-smooth locus.
pub fn grad_check_with_validity(
    name: &str,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    valid: impl Fn(&[Tensor]) -> bool,
    forward64: impl Fn(&[Tensor64]) -> Result<Tensor64>,
    vjp: impl Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
) -> Result<GradCheckReport> {
    if !valid(inputs) {
        return Err(Error::contract(
            "grad_check",
            format!("{name}: probe point inside a non-smooth exclusion zone"),
        ));
    }
    grad_check(name, inputs, h, tol, forward64, vjp)
}

/// Sample a tensor with entries in [-scale, scale] nudged outside
/// `radius` of every locus in `loci`.
pub fn sample_away_from(
    rng: &mut impl Rng,
    shape: &[usize],
    scale: f32,
    loci: &[f32],
    radius: f32,
) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(-scale..scale);
        if loci.iter().all(|&l| (v - l).abs() >= radius) {
            break v;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn matmul_gradient_passes() {
        let mut rng = rng_from(1, 0);
        for trial in 0..10 {
            let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
            let report = grad_check(
                &format!("matmul/{trial}"),
                &[a, b],
                1e-3,
                1e-4,
                |pt| ops::matmul(&pt[0], &pt[1]),
                |pt, ct| {
                    let (da, db) = ops::matmul_vjp(&pt[0], &pt[1], ct)?;
                    Ok(vec![da, db])
                },
            )
            .unwrap();
            assert!(report.pass, "max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn linear_layer_gradient_passes_at_1e_minus_3() {
        let mut rng = rng_from(2, 0);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 4], 0.5, &mut rng);
        let b = Tensor::randn(&[4], 0.5, &mut rng);
        let report = grad_check(
            "linear",
            &[x, w, b],
            1e-3,
            1e-4,
            |pt| {
                let y = ops::matmul(&pt[0], &pt[1])?;
                ops::add_bias_rows(&y, &pt[2])
            },
            |pt, ct| {
                let (dx, dw) = ops::matmul_vjp(&pt[0], &pt[1], ct)?;
                let db = ops::bias_rows_vjp(ct);
                Ok(vec![dx, dw, db])
            },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut rng = rng_from(3, 0);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let report = grad_check(
            "matmul-signflip",
            &[a, b],
            1e-3,
            1e-4,
            |pt| ops::matmul(&pt[0], &pt[1]),
            |pt, ct| {
                let (da, db) = ops::matmul_vjp(&pt[0], &pt[1], ct)?;
                Ok(vec![ops::scale(&da, -1.0), db])
            },
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn validity_gate_rejects_points_near_kinks() {
        let x = Tensor::from_vec(&[2], vec![0.005, 1.2]).unwrap();
        let res = grad_check_with_validity(
            "relu-near-zero",
            &[x],
            1e-3,
            1e-4,
            |pt| pt[0].data().iter().all(|&v| v.abs() >= 0.01),
            |pt| Ok(ops::relu(&pt[0])),
            |pt, ct| Ok(vec![ops::relu_vjp(&pt[0], ct)?]),
        );
        assert!(res.is_err());
    }

    #[test]
    fn sample_away_from_respects_radius() {
        let mut rng = rng_from(4, 0);
        let t = sample_away_from(&mut rng, &[64], 2.0, &[0.0, 1.0, -1.0], 0.05);
        for &v in t.data() {
            assert!(v.abs() >= 0.05);
            assert!((v - 1.0).abs() >= 0.05);
            assert!((v + 1.0).abs() >= 0.05);
        }
    }
}
