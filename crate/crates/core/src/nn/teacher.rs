use super::{Classifier, ForwardHook, NoHook};
use crate::checkpoint::state_digest;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trained classifier used as a frozen reference.
///
/// Only shared access to the network is exposed, so parameters and running
/// statistics cannot change once a teacher exists.
#[derive(Clone, Debug)]
pub struct TeacherModel<T> {
    net: Classifier<T>,
    recorded_accuracy: Option<f64>,
}

impl<T: Scalar> TeacherModel<T> {
    /// Freezes `net`. Fails if it has no batch-norm layer.
    pub fn freeze(net: Classifier<T>, recorded_accuracy: Option<f64>) -> Result<Self> {
        if net.bn_layers().is_empty() {
            return Err(Error::NoBatchNorm);
        }
        Ok(Self {
            net,
            recorded_accuracy,
        })
    }

    pub fn net(&self) -> &Classifier<T> {
        &self.net
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    pub fn recorded_accuracy(&self) -> Option<f64> {
        self.recorded_accuracy
    }

    /// Evaluation-mode logits `(B, K)`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.logits(batch, &mut NoHook)
    }

    pub fn forward_with(&self, batch: &Tensor<T>, hook: &mut dyn ForwardHook<T>) -> Result<Tensor<T>> {
        self.net.logits(batch, hook)
    }

    /// SHA-256 over all parameters and running statistics.
    pub fn digest(&self) -> String {
        state_digest(&self.net.state())
    }

    /// A mutable copy of the underlying network (e.g. to seed a student).
    pub fn clone_net(&self) -> Classifier<T> {
        self.net.clone()
    }
}
