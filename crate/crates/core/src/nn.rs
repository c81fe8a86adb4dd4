//! Layer containers shared by the decoder and the perceptron: thin structs
//! around the tensor kernels with explicit grad buffers, composed by each
//! training loop in topological order.

use rand::Rng;

use crate::error::Result;
use crate::lora::{lora_forward, lora_forward_vjp, LoraAdapter};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor, TensorBase};

/// y = x·Wᵀ + b with W stored [out, in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub w: Tensor,
    pub b: Tensor,
}

/// Pure forward used by both precisions.
pub fn linear_fwd<T: Scalar>(
    x: &TensorBase<T>,
    w: &TensorBase<T>,
    b: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    ops::add_bias_rows(&ops::matmul_nt(x, w)?, b)
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f32).sqrt(), rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[d_out, d_in]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(self.b.shape()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear_fwd(x, &self.w, &self.b)
    }

    /// Frozen-base forward with an optional adapter on the weight.
    pub fn forward_adapted(&self, x: &Tensor, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        match adapter {
            None => self.forward(x),
            Some(a) => ops::add_bias_rows(&lora_forward(x, &self.w, a)?, &self.b),
        }
    }

    /// Accumulates dW, db into `grads`; returns dx.
    pub fn vjp(&self, x: &Tensor, dy: &Tensor, grads: &mut LinearGrads) -> Result<Tensor> {
        let dw = ops::matmul_tn(dy, x)?;
        ops::axpy(&mut grads.w, 1.0, &dw)?;
        ops::axpy(&mut grads.b, 1.0, &ops::bias_rows_vjp(dy))?;
        ops::matmul(dy, &self.w)
    }

    /// Adapter-only backward: base W and b receive no gradient. Accumulates
    /// (dA, dB) into `adapter_grads`; returns dx.
    pub fn vjp_adapted(
        &self,
        x: &Tensor,
        dy: &Tensor,
        adapter: &LoraAdapter,
        adapter_grads: &mut (Tensor, Tensor),
    ) -> Result<Tensor> {
        let (dx, da, db) = lora_forward_vjp(x, &self.w, adapter, dy)?;
        ops::axpy(&mut adapter_grads.0, 1.0, &da)?;
        ops::axpy(&mut adapter_grads.1, 1.0, &db)?;
        Ok(dx)
    }
}

/// Single-image conv layer, weights [out, in, k, k].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv2d {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f32;
        Conv2d {
            w: Tensor::randn(&[c_out, c_in, k, k], 1.0 / fan_in.sqrt(), rng),
            b: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn zero_grads(&self) -> Conv2dGrads {
        Conv2dGrads {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(self.b.shape()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.w, &self.b, self.stride, self.pad)
    }

    pub fn vjp(&self, x: &Tensor, dy: &Tensor, grads: &mut Conv2dGrads) -> Result<Tensor> {
        let (dx, dw, db) = ops::conv2d_vjp(x, &self.w, self.stride, self.pad, dy)?;
        ops::axpy(&mut grads.w, 1.0, &dw)?;
        ops::axpy(&mut grads.b, 1.0, &db)?;
        Ok(dx)
    }
}
