//! Small f64 tensor engine with reverse-mode autodiff, Adam, a
//! warmup/decay learning-rate schedule and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, ManifestEntry};
pub use graph::{BatchNormMode, BatchStats, Graph, Var};
pub use optim::{adam_step, AdamState, LrSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, PEAK_LR, WARMUP_FRACTION};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Row-wise softmax of a plain slice, for inference outside a graph.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
