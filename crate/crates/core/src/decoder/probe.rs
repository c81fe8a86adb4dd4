//! First-layer weight probe: per-input-channel L1 mass of the tokenizer
//! weight matrix, a 64-bin histogram of those masses, and a Gini sparsity
//! coefficient.

use serde::Serialize;

use crate::decoder::model::DecoderWeights;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, Serialize)]
pub struct HistogramStats {
    pub min: f32,
    pub max: f32,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FirstLayerStats {
    pub per_channel_l1: Vec<f32>,
    pub histogram: HistogramStats,
    pub gini: f64,
    pub degenerate: bool,
}

/// Gini coefficient of a non-negative vector; 0 for the all-zero vector
/// (flagged degenerate by the caller).
pub fn gini(values: &[f32]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut weighted = 0.0f64;
    for (i, &v) in sorted.iter().enumerate() {
        weighted += (i + 1) as f64 * v;
    }
    (2.0 * weighted) / (n as f64 * total) - (n as f64 + 1.0) / n as f64
}

fn histogram(values: &[f32]) -> HistogramStats {
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut counts = vec![0u32; HISTOGRAM_BINS];
    let span = (max - min).max(1e-12);
    for &v in values {
        let bin = (((v - min) / span) * HISTOGRAM_BINS as f32) as usize;
        counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    HistogramStats { min, max, counts }
}

/// Summary of the tokenizer (first) layer: column-wise |W| mass per input
/// channel.
pub fn first_layer_stats(w: &DecoderWeights) -> FirstLayerStats {
    first_layer_stats_of(&w.tokenizer.w)
}

pub fn first_layer_stats_of(weight: &crate::tensor::Tensor) -> FirstLayerStats {
    let out_dim = weight.shape()[0];
    let in_dim = weight.shape()[1];
    let mut l1 = vec![0.0f32; in_dim];
    for r in 0..out_dim {
        for (c, acc) in l1.iter_mut().enumerate() {
            *acc += weight.data()[r * in_dim + c].abs();
        }
    }
    let degenerate = l1.iter().all(|&v| v == 0.0);
    FirstLayerStats {
        histogram: histogram(&l1),
        gini: gini(&l1),
        degenerate,
        per_channel_l1: l1,
    }
}
