//! Adapter contracts: zero-init output identity, effective-weight rank
//! bounded by r (checked against a test-side Jacobi SVD), parameter count
//! and freeze behavior under direct gradient steps.

mod common;

use pact_core::lora::{lora_forward, lora_forward_vjp, lora_merge, LoraAdapter};
use pact_core::rng::rng_from;
use pact_core::tensor::{ops, Tensor};

#[test]
fn step_zero_output_equals_base_exactly() {
    let mut rng = rng_from(1, 0);
    for (d_in, d_out, r) in [(8usize, 8usize, 2usize), (12, 6, 4), (16, 16, 16)] {
        let adapter = LoraAdapter::init(d_in, d_out, r, &mut rng).unwrap();
        let w = Tensor::randn(&[d_out, d_in], 1.0, &mut rng);
        let x = Tensor::randn(&[5, d_in], 1.0, &mut rng);
        let base = ops::matmul_nt(&x, &w).unwrap();
        let adapted = lora_forward(&x, &w, &adapter).unwrap();
        for (a, b) in base.data().iter().zip(adapted.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn trained_delta_rank_is_bounded_by_r() {
    let mut rng = rng_from(2, 0);
    for r in [1usize, 2, 4, 8] {
        let d_in = 24;
        let d_out = 20;
        let mut adapter = LoraAdapter::init(d_in, d_out, r, &mut rng).unwrap();
        let w = Tensor::randn(&[d_out, d_in], 0.5, &mut rng);
        // regression-train the adapter for 150 steps
        let x = Tensor::randn(&[16, d_in], 1.0, &mut rng);
        let target = Tensor::randn(&[16, d_out], 1.0, &mut rng);
        let w_bytes: Vec<u32> = w.data().iter().map(|v| v.to_bits()).collect();
        for _ in 0..150 {
            let y = lora_forward(&x, &w, &adapter).unwrap();
            let dy = ops::scale(&ops::sub(&y, &target).unwrap(), 2.0 / 16.0);
            let (_, da, db) = lora_forward_vjp(&x, &w, &adapter, &dy).unwrap();
            ops::axpy(&mut adapter.a, -0.05, &da).unwrap();
            ops::axpy(&mut adapter.b, -0.05, &db).unwrap();
        }
        // base weight untouched by construction and by bytes
        for (v, bits) in w.data().iter().zip(w_bytes.iter()) {
            assert_eq!(v.to_bits(), *bits);
        }
        let delta = adapter.delta().unwrap();
        assert!(delta.data().iter().any(|&v| v != 0.0), "adapter never moved");
        let sv = common::singular_values(&delta);
        let max_sv = sv[0].max(1e-30);
        let numerical_rank = sv.iter().filter(|&&s| s > 1e-5 * max_sv).count();
        assert!(
            numerical_rank <= r,
            "rank {numerical_rank} exceeds r={r}; singular values {sv:?}"
        );
    }
}

#[test]
fn merged_and_unmerged_forward_agree() {
    let mut rng = rng_from(3, 0);
    let mut adapter = LoraAdapter::init(10, 7, 3, &mut rng).unwrap();
    adapter.b = Tensor::randn(&[7, 3], 0.4, &mut rng);
    let w = Tensor::randn(&[7, 10], 1.0, &mut rng);
    let merged = lora_merge(&w, &adapter).unwrap();
    for _ in 0..20 {
        let x = Tensor::randn(&[3, 10], 2.0, &mut rng);
        let a = lora_forward(&x, &w, &adapter).unwrap();
        let b = ops::matmul_nt(&x, &merged).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }
}

#[test]
fn adapter_gradients_pass_finite_differences() {
    use pact_core::tensor::grad_check;
    let mut rng = rng_from(4, 0);
    let mut adapter = LoraAdapter::init(6, 5, 2, &mut rng).unwrap();
    adapter.b = Tensor::randn(&[5, 2], 0.3, &mut rng); // move off the zero init
    let w = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let report = grad_check(
        "lora_forward",
        &[x, adapter.a.clone(), adapter.b.clone()],
        1e-3,
        1e-4,
        |pt| {
            let base = ops::matmul_nt(&pt[0], &w.to_f64())?;
            let xa = ops::matmul_nt(&pt[0], &pt[1])?;
            let delta = ops::matmul_nt(&xa, &pt[2])?;
            ops::add(&base, &delta)
        },
        |pt, ct| {
            let ad = LoraAdapter {
                a: pt[1].clone(),
                b: pt[2].clone(),
                rank: 2,
            };
            let (dx, da, db) = lora_forward_vjp(&pt[0], &w, &ad, ct)?;
            Ok(vec![dx, da, db])
        },
    )
    .unwrap();
    assert!(report.pass, "{}", report.max_rel_err);
}

#[test]
fn default_rank_is_sixteen() {
    let cfg = pact_core::config::RunConfig::desk_default();
    assert_eq!(cfg.vp.lora_rank, 16);
}
