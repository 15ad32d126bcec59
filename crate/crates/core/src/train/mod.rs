//! Gradients, optimizer and the subset-sampling training loop.

mod backward;
mod optim;
mod sample;
mod trainer;

use crate::model::ModelParams;

pub use backward::{
    backward, backward_counted, finite_difference_grads, worst_relative_error, BackwardOptions,
};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule};
pub use sample::amortized_sample;
pub use trainer::{evaluate, init_for_dataset, train, EpochRecord, TrainConfig, TrainOutcome};

/// One gradient buffer per learnable tensor, laid out like [`ModelParams`].
/// The coordinate bounds are copied through and never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore(pub ModelParams);

impl GradStore {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.0.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn zero(&mut self) {
        for t in self.0.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.tensors().iter().all(|t| t.data.iter().all(|g| g.is_finite()))
    }
}
