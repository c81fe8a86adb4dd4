//! Voxel-conditioned detection sandbox.
//!
//! A self-contained CPU stack for studying how a measured brain-activity
//! vector (a "voxel" recording) can steer an image model: a decoder maps
//! voxels to token embeddings, a shared cross-attention block injects those
//! tokens into multi-scale image features, and a small two-stage detector
//! consumes the fused features for object detection and instance
//! segmentation. Everything runs on synthetic scenes with exact ground
//! truth, every backward pass is hand-derived and verified against central
//! differences, and the evaluation follows the COCO protocol.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod perceptron;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tensor64};

/// Thread cap for per-image evaluation, read from `PA_THREADS` (defaults to 1).
pub fn eval_threads() -> usize {
    std::env::var("PA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Map `f` over items on up to `threads` worker threads, preserving order.
/// Aggregation stays deterministic because results are placed by index.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<&mut Option<R>>> =
        out.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                **slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    drop(slots);
    out.into_iter().map(|v| v.unwrap()).collect()
}
