//! Dense tensors, a reverse-mode tape, and the kernels the model is built from.

mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{BatchMoments, BnMode, CustomOp, Graph, Var};
pub use scalar::{gemm, MatMut, MatRef, Scalar};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Batch-norm epsilon.
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Batch-norm running-statistics momentum.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Running mean and variance tracked by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential update from training-mode batch moments; the variance
    /// folded in is the unbiased estimate.
    pub fn update(&mut self, moments: &BatchMoments<T>, momentum: T) {
        let n = moments.count;
        let correction = if n > 1 {
            T::from_usize_lossy(n) / T::from_usize_lossy(n - 1)
        } else {
            T::one()
        };
        let keep = T::one() - momentum;
        for (m, &b) in self.mean.iter_mut().zip(&moments.mean) {
            *m = keep * *m + momentum * b;
        }
        for (v, &b) in self.var.iter_mut().zip(&moments.var) {
            *v = keep * *v + momentum * b * correction;
        }
    }
}
